# app/services/rtp/__init__.py
from app.services.rtp.bench import BenchReport, load_profile, run_bench
from app.services.rtp.outsync import simulate_out_sync
from app.services.rtp.serving import handle_request, handle_request_recompute
from app.services.rtp.storage import storage_report

__all__ = [
    "BenchReport",
    "handle_request",
    "handle_request_recompute",
    "load_profile",
    "run_bench",
    "simulate_out_sync",
    "storage_report",
]
