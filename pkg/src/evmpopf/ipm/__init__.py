"""Interior-point NLP solver."""

from evmpopf.ipm.kkt import Inertia, KktError, KktSystem, Regularization, kkt_solve
from evmpopf.ipm.nlp import CallbackNlp, Nlp
from evmpopf.ipm.solver import STATUSES, IpmOptions, IpmResult, solve, write_trace

__all__ = [
    "CallbackNlp",
    "Inertia",
    "IpmOptions",
    "IpmResult",
    "KktError",
    "KktSystem",
    "Nlp",
    "Regularization",
    "STATUSES",
    "kkt_solve",
    "solve",
    "write_trace",
]
