"""Distributed execution: wire protocol, tail server, edge runner, policy report."""

from .protocol import Frame, MsgType, activation_frame_size, decode_frame, encode_frame, read_frame
from .runner import (
    LOOPBACK,
    TCP,
    ChannelModel,
    PolicyReport,
    PolicyRow,
    TrafficLog,
    TrafficRecord,
    compare_policies,
    run_edge,
)
from .transport import LoopbackTransport, TailServer, TcpTransport, run_remote, send_shutdown

__all__ = [
    "Frame", "MsgType", "activation_frame_size", "decode_frame", "encode_frame", "read_frame",
    "LOOPBACK", "TCP", "ChannelModel", "PolicyReport", "PolicyRow", "TrafficLog", "TrafficRecord",
    "compare_policies", "run_edge",
    "LoopbackTransport", "TailServer", "TcpTransport", "run_remote", "send_shutdown",
]
