from .miniapp import HeartbeatMode, MiniappConfig, MiniappReport, run_miniapp
from .pingpong import BandwidthReport, PingPongConfig, run_pingpong
from .solver import BitFlip, SolverConfig, SolverReport, run_solver

__all__ = [
    "BandwidthReport",
    "BitFlip",
    "HeartbeatMode",
    "MiniappConfig",
    "MiniappReport",
    "PingPongConfig",
    "SolverConfig",
    "SolverReport",
    "run_miniapp",
    "run_pingpong",
    "run_solver",
]
