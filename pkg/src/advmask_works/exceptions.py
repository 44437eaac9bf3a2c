# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

class AdvMaskWorksError(Exception):
    pass

class DimensionError(AdvMaskWorksError):
    pass

class ContractError(AdvMaskWorksError):
    """A precondition of an operation does not hold.

    Raised for arguments that are well-typed but outside what the operation
    accepts: a non-scalar loss handed to ``backward()``, a label outside the
    class range, an empty set of points, a non-positive ``L_init`` and the
    like.

    """
    pass

class NumericalError(ContractError):
    """An operation produced a NaN or infinite value."""
    pass

class DivergenceError(AdvMaskWorksError):

    def __init__(self, message, epoch=None, step=None):
        super(DivergenceError, self).__init__(message)
        self.epoch = epoch
        self.step = step

class FormatError(AdvMaskWorksError):
    """The bytes of a model file, mask cache or dataset file are malformed.

    Covers bad magic numbers, unsupported versions, truncated or oversized
    payloads and checksum mismatches.

    """
    pass

class StaleCacheError(AdvMaskWorksError):
    """A mask cache was built against another model, attack configuration
    or dataset than the one in use."""
    pass

class ConfigOptionError(AdvMaskWorksError):
    pass
