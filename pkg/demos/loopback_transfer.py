"""Send the thousandth-scale hierarchy over loopback with injected loss.

The receiver runs in a forked child so it drains its socket independently of
the paced sender. Both reports are printed as they come back.

    python demos/loopback_transfer.py [SHIM]      # default poisson-pct:2
"""

from __future__ import annotations

import multiprocessing as mp
import sys

from ectransfer import model
from ectransfer.model import DeadlineRequest, ErrorBoundRequest, NetworkParams
from ectransfer.transport import Receiver, ReceiverConfig, SenderOptions, parse_shim, send_with_deadline, send_with_error_bound

RATE = 8000.0


def _serve(q):
    rx = Receiver(("127.0.0.1", 0), ReceiverConfig(window_s=0.1, ftg_timeout_s=0.2))
    q.put(rx.control_address)
    q.put(rx.serve())


def start_receiver():
    ctx = mp.get_context("fork")
    q = ctx.Queue()
    proc = ctx.Process(target=_serve, args=(q,), daemon=True)
    proc.start()
    return proc, q, q.get()


def main(shim_spec: str) -> None:
    h = model.nyx_mini_hierarchy()
    params = NetworkParams(latency_s=0.001, loss_rate=0.0)
    opts = SenderOptions(rate_limit=RATE, ec_rate=1e9, shim=parse_shim(shim_spec, RATE),
                         ftg_timeout_s=0.2, planning_loss_rate=0.02 * RATE)

    proc, q, addr = start_receiver()
    rep = send_with_error_bound(addr, h, ErrorBoundRequest(h.error_bounds[-1]), params, opts)
    rx = q.get()
    proc.join()
    print(f"error-bound mode over {addr[0]}:{addr[1]} with shim {shim_spec}")
    print(f"  {rep.packets_sent} datagrams, {rep.packets_shim_dropped} dropped by the shim, "
          f"{rx.packets_received} received")
    print(f"  parity plan {rep.plan_trace}, lost groups per round {[len(x) for x in rep.lost_ftgs_by_round]}")
    print(f"  {rep.total_time_s:.3f}s, {rep.levels_intact} levels intact, checksums ok: {rep.checksums_ok}")

    tau = 0.9 * rep.total_time_s
    proc, q, addr = start_receiver()
    dl = send_with_deadline(addr, h, DeadlineRequest(tau), params, opts)
    q.get()
    proc.join()
    print(f"deadline mode, tau {tau:.3f}s")
    print(f"  finished in {dl.total_time_s:.3f}s, {dl.levels_intact} of {dl.levels_planned} planned levels intact, "
          f"error bound {dl.achieved_error_bound:g}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "poisson-pct:2")
