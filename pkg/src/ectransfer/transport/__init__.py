"""UDP data plane with a TCP control channel and a send-side loss shim."""

from .receiver import Receiver, receive
from .sender import measure_ec_rate, send_with_deadline, send_with_error_bound
from .session import DEADLINE, ERROR_BOUND, ReceiverConfig, SenderOptions, SessionAborted, TokenBucket, TransferReport
from .shim import EveryNth, LossShim, SeededPoisson, TraceFile, parse_shim
from .wire import HEADER_SIZE, MAGIC, Packet, WireError

__all__ = [
    "DEADLINE", "ERROR_BOUND", "EveryNth", "HEADER_SIZE", "LossShim", "MAGIC", "Packet", "Receiver",
    "ReceiverConfig", "SeededPoisson", "SenderOptions", "SessionAborted", "TokenBucket", "TraceFile",
    "TransferReport", "WireError", "measure_ec_rate", "parse_shim", "receive", "send_with_deadline",
    "send_with_error_bound",
]
