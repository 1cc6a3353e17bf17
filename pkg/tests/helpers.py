"""Shared test utilities: finite-difference gradient checking for single ops."""

import numpy as np

from sandglasset.optim import ParamTable, grad_check


def op_grad_check(build_loss, arrays, h=1e-5):
    """Gradient-check an op: ``build_loss(table)`` must return a scalar Tensor.

    ``arrays`` maps parameter names to float64 arrays registered in a fresh
    ParamTable; returns the GradCheckReport.
    """
    table = ParamTable(dtype=np.float64)
    for name, arr in arrays.items():
        table.register(name, np.asarray(arr, dtype=np.float64))
    return grad_check(build_loss, table, h=h)


def weighted_sum(out, weights):
    """Deterministic scalar readout so every output element affects the loss."""
    from sandglasset.tensor import Tensor, mul, tsum

    return tsum(mul(out, Tensor(np.asarray(weights, dtype=out.data.dtype))))


def rand_weights(rng, shape):
    return rng.standard_normal(shape)
