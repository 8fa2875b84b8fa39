from __future__ import absolute_import

from .qcqp import LiftedPoint, QcqpInstance, QuadForm

__version__ = "0.3.0"
