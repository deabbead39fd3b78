"""Command-line entry points: simulate, run-ot, rates, match.

Exit codes: 0 success, 2 usage, 3 protocol abort (reason on stderr), 4 I/O.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import mpc, pipeline, report
from .auth import SecretStore
from .errors import ProtocolAbort
from .params import ProtocolParams, accumulation_time, ot_rate_curve, write_rate_csv
from .qsim import RECEIVER, SENDER, ChannelModel, RawFormatError, channel_at, generate_block, raw_filename, write_raw
from .rng import Drbg
from .transport import HandshakeError, TransportError, connect, loopback_pair

EXIT_OK, EXIT_USAGE, EXIT_ABORT, EXIT_IO = 0, 2, 3, 4


class UsageError(Exception):
    pass


class AbortExit(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(reason)
        self.reason, self.detail = reason, detail


# -- helpers --------------------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(float(text))
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _load_params(path) -> ProtocolParams:
    if path is None:
        return ProtocolParams()
    return ProtocolParams.from_config(Path(path).read_text())


def _parse_request(text: str) -> tuple[int, int]:
    for sep in ("x", "X", "×", "*"):
        if sep in text:
            count, length = text.split(sep, 1)
            return _positive_int(count), _positive_int(length)
    raise UsageError(f"--request must look like COUNTxLENGTH, got {text!r}")


def _choices(hex_text: str | None, count: int) -> list[int] | None:
    if hex_text is None:
        return None
    try:
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(hex_text), dtype=np.uint8))
    except ValueError:
        raise UsageError("--choices-hex is not valid hex") from None
    if len(bits) < count:
        raise UsageError(f"--choices-hex holds {len(bits)} bits, need {count}")
    return [int(b) for b in bits[:count]]


def _model(args) -> ChannelModel:
    base = ChannelModel.flat(args.qber) if getattr(args, "qber", None) is not None else ChannelModel()
    return base.at_loss(args.loss_db)


def _secret(args, seed) -> bytes:
    if args.secret_file:
        return bytes.fromhex("".join(Path(args.secret_file).read_text().split()))
    if args.transport != "loopback":
        raise UsageError("--secret-file is required for a networked run")
    return pipeline.shared_secret(seed)


def _source(args, party: str, seed):
    if args.raw_dir:
        return pipeline.FileSource(args.raw_dir, party)
    return pipeline.SimulatedSource(_model(args), party, Drbg(seed).child("sim").seed, args.block_events)


def result_record(r: pipeline.OtResult) -> dict:
    rec = {"request_id": r.request_id, "index": r.index, "session": r.session_id, "role": r.role,
           "status": r.status, "length": r.length}
    if not r.ok:
        rec.update(reason=r.reason, detail=r.detail)
    elif r.mc is not None:
        rec.update(c=r.c, mc=r.mc.hex())
    else:
        rec.update(m0=r.m0.hex(), m1=r.m1.hex())
    rec.update(p_hat=r.p_hat, f_bound=r.f_bound, f_actual=r.f_actual, secure_bound=r.secure_bound)
    return rec


def load_results(path) -> list[pipeline.OtResult]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        r = pipeline.OtResult(d["request_id"], d["index"], d.get("session", 0), d["role"], d["status"],
                              reason=d.get("reason"), length=d.get("length", 0))
        if r.ok:
            if "mc" in d:
                r.mc, r.c = bytes.fromhex(d["mc"]), int(d["c"])
            else:
                r.m0, r.m1 = bytes.fromhex(d["m0"]), bytes.fromhex(d["m1"])
        out.append(r)
    return out


def _write_report(path, party: pipeline.Party, results, wall: float) -> dict:
    summary = report.run_summary(results, wall)
    lines = party.log.lines()
    lines += [f"{time.time():.6f} summary {k} {v}" for k, v in summary.items()]
    if path:
        Path(path).write_text("\n".join(lines) + "\n")
    return summary


# -- commands -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _model(args)
    root = Drbg(args.seed)
    files = []
    for block_id in range(args.blocks):
        a, b = generate_block(model, args.n0, root.child("sim").seed + block_id.to_bytes(8, "big"), block_id)
        for blk, party in ((a, SENDER), (b, RECEIVER)):
            path = out / raw_filename(block_id, party)
            write_raw(path, blk)
            files.append(path.name)
    rate, q_hv, q_da = channel_at(model)
    manifest = {"n0": args.n0, "blocks": args.blocks, "seed": args.seed, "loss_db": model.loss_db,
                "qber_hv": q_hv, "qber_da": q_da, "coincidence_hz": rate,
                "accidental_floor": model.accidental_floor, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {len(files)} files to {out} (QBER {100 * (q_hv + q_da) / 2:.3f} %)")
    return EXIT_OK


def _finish_ot(args, party, results, wall) -> int:
    summary = _write_report(args.report, party, results, wall)
    records = [result_record(r) for r in results]
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r) + "\n" for r in records))
    for r in results:
        if r.ok:
            val = f"c={r.c} mc={r.mc.hex()}" if r.mc is not None else f"m0={r.m0.hex()} m1={r.m1.hex()}"
            print(f"{party.role} ot {r.index} ok {val}")
        else:
            print(f"{party.role} ot {r.index} aborted {r.reason}")
    print(f"{party.role} summary " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                             for k, v in summary.items()))
    bad = [r for r in results if not r.ok]
    if bad:
        raise AbortExit(bad[0].reason, bad[0].detail)
    return EXIT_OK


def cmd_run_ot(args) -> int:
    params = _load_params(args.params_file)
    count, length = _parse_request(args.request)
    choices = _choices(args.choices_hex, count)
    if args.transport == "loopback":
        return _run_ot_loopback(args, params, count, length, choices)
    if args.role is None or args.endpoint is None:
        raise UsageError("--role and --endpoint are required with --transport tcp")
    if args.role == SENDER and choices is not None:
        raise UsageError("the sender takes no --choices-hex")
    secret = _secret(args, args.seed)
    try:
        t = connect(args.role, args.endpoint, params.digest(), timeout=args.timeout)
    except HandshakeError as exc:
        raise AbortExit("protocol_violation", str(exc)) from None
    except ProtocolAbort as exc:
        raise AbortExit(exc.reason, exc.detail) from None
    party = pipeline.Party(args.role, t, params, SecretStore(bytearray(secret)), _source(args, args.role, args.seed),
                           Drbg(args.seed).child(args.role))
    t0 = time.perf_counter()
    try:
        results = party.run_request(pipeline.OtRequest(count, length, choices if args.role == RECEIVER else None))
    finally:
        t.close()
    return _finish_ot(args, party, results, time.perf_counter() - t0)


def _run_ot_loopback(args, params, count, length, choices) -> int:
    seed = args.seed
    ta, tb = loopback_pair(args.timeout)
    if args.tamper:
        ftype, _, side = args.tamper.partition("@")
        if side in ("", SENDER):
            ta = pipeline.TamperingTransport(ta, ftype)
        else:
            tb = pipeline.TamperingTransport(tb, ftype)
    sources = (_source(args, SENDER, seed), _source(args, RECEIVER, seed))
    alice, bob = pipeline.make_pair(params, seed=seed, secret=_secret(args, seed), transport_pair=(ta, tb),
                                    sources=sources)
    t0 = time.perf_counter()
    res_a, res_b = pipeline.run_pair(alice, bob, pipeline.OtRequest(count, length),
                                     pipeline.OtRequest(count, length, choices))
    wall = time.perf_counter() - t0
    for a, b in zip(res_a, res_b):
        if a.ok and b.ok and (a.m0, a.m1)[b.c] != b.mc:
            raise AbortExit("ir_fail", f"OT {a.index}: receiver output differs from the sender's string")
    first_abort = None
    base_report, base_out = args.report, args.out
    for party, results in ((alice, res_a), (bob, res_b)):
        args.report = base_report and f"{base_report}.{party.role}"
        args.out = base_out and f"{base_out}.{party.role}"
        try:
            _finish_ot(args, party, results, wall)
        except AbortExit as exc:
            first_abort = first_abort or exc
    args.report, args.out = base_report, base_out
    if args.plots:
        Path(args.plots).mkdir(parents=True, exist_ok=True)
        report.plot_stage_timings(res_a, Path(args.plots) / "stage_timings.png")
    if first_abort:
        raise first_abort
    return EXIT_OK


def cmd_rates(args) -> int:
    params = _load_params(args.params_file)
    model = ChannelModel()
    eps = report.parse_grid(args.eps)
    losses = report.parse_grid(args.loss_grid)
    rows = ot_rate_curve(model, params, eps, losses)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        write_rate_csv(rows, fh)
    rate0 = channel_at(model, 0.0)[0]
    n0_rows = report.n0_rows(params, eps, rate0)
    n0_path = out.with_name(out.stem + "_n0.csv")
    with n0_path.open("w") as fh:
        report.write_n0_csv(n0_rows, fh)
    if args.plots:
        d = Path(args.plots)
        d.mkdir(parents=True, exist_ok=True)
        report.plot_rates(rows, d / "ot_rate_vs_loss.png")
        report.plot_n0(n0_rows, d / "n0_vs_eps.png")
        report.plot_qber(model, np.linspace(0, max(losses + [10.0]), 101), d / "qber_vs_loss.png")
    for r in rows:
        if r.loss_db == 0.0:
            t = accumulation_time(r.n0, rate0) if r.n0 else float("nan")
            print(f"eps={r.eps:.0e} loss=0dB n0={r.n0} ot_per_s={r.ot_per_s:.4e} accumulation_s={t:.1f}")
    infeasible = [r.loss_db for r in rows if not r.feasible]
    if infeasible:
        print(f"infeasible from {min(infeasible):.2f} dB")
    print(f"wrote {out} and {n0_path}")
    return EXIT_OK


def _base_ots(args, role: str):
    if args.base_ots:
        results = [r for r in load_results(args.base_ots) if r.role == role]
        return mpc.BaseOts.from_results(results)
    if args.dealer_seed is None:
        raise UsageError("give --base-ots (run-ot output) or --dealer-seed for an offline demo")
    s, r = mpc.dealer_rots(Drbg(args.dealer_seed).child("dealer"))
    return mpc.BaseOts(s if role == SENDER else r)


def _print_match(role: str, res: mpc.MatchResult) -> None:
    print(f"{role} entry distance verdict")
    for i, (d, v) in enumerate(zip(res.values, res.verdicts)):
        print(f"{role} {i} {d:.6f} {'match' if v else '-'}")
    print(f"{role} matches={res.matches} ots={res.ots_used} triples={res.triples} "
          f"mults={res.ops.mults} adds={res.ops.adds} seconds={res.seconds['total']:.3f}")
    print(f"{role} note: distances are revealed to both parties; the threshold is applied in the clear")


def cmd_match(args) -> int:
    if args.transport == "loopback":
        if not (args.db and args.template):
            raise UsageError("loopback match needs both --db and --template")
        db, tpl = mpc.read_db(args.db), mpc.read_db(args.template)
        la, lb = mpc.link_pair(args.timeout)
        base_a, base_b = _base_ots(args, SENDER), _base_ots(args, RECEIVER)
        out: dict = {}

        def other():
            try:
                out["b"] = mpc.run_match(1, lb, base_b, Drbg(args.seed).child("p1"), args.threshold, template=tpl[0])
            except BaseException as exc:
                out["err"] = exc
                lb.transport.close()

        th = threading.Thread(target=other, daemon=True)
        th.start()
        try:
            res = mpc.run_match(0, la, base_a, Drbg(args.seed).child("p0"), args.threshold, db=db)
        except TransportError:
            th.join()
            raise out.get("err") or AbortExit("protocol_violation", "peer failed") from None
        th.join()
        if "err" in out:
            raise out["err"]
        _print_match(SENDER, res)
        _print_match(RECEIVER, out["b"])
        return EXIT_OK
    if args.role is None or args.endpoint is None:
        raise UsageError("--role and --endpoint are required with --transport tcp")
    party = 0 if args.role == SENDER else 1
    if party == 0 and not args.db:
        raise UsageError("the sender side holds the database: give --db")
    if party == 1 and not args.template:
        raise UsageError("the receiver side holds the template: give --template")
    base = _base_ots(args, args.role)
    t = connect(args.role, args.endpoint, hashlib.sha256(b"qotpipe-match").digest(), timeout=args.timeout)
    try:
        link = mpc.Link(t)
        rng = Drbg(args.seed).child(f"p{party}")
        if party == 0:
            res = mpc.run_match(0, link, base, rng, args.threshold, db=mpc.read_db(args.db))
        else:
            res = mpc.run_match(1, link, base, rng, args.threshold, template=mpc.read_db(args.template)[0])
    finally:
        t.close()
    _print_match(args.role, res)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qotpipe", description="Quantum oblivious transfer post-processing pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write simulated raw event blocks")
    s.add_argument("--n0", type=_positive_int, required=True)
    s.add_argument("--loss-db", type=float, default=0.0)
    s.add_argument("--qber", type=float, default=None, help="flat QBER instead of the calibrated source")
    s.add_argument("--seed", default="0")
    s.add_argument("--blocks", type=_positive_int, default=1)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run-ot", help="run OT sessions as one party or both (loopback)")
    r.add_argument("--role", choices=(SENDER, RECEIVER))
    r.add_argument("--endpoint")
    r.add_argument("--transport", choices=("tcp", "loopback"), default="tcp")
    r.add_argument("--params-file")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--raw-dir")
    src.add_argument("--live-sim", action="store_true", help="generate raw data on the fly (default)")
    r.add_argument("--loss-db", type=float, default=0.0)
    r.add_argument("--qber", type=float, default=None)
    r.add_argument("--block-events", type=_positive_int, default=400_000)
    r.add_argument("--request", default="1x128")
    r.add_argument("--choices-hex")
    r.add_argument("--secret-file")
    r.add_argument("--report")
    r.add_argument("--out", help="JSON-lines results file")
    r.add_argument("--plots", help="directory for PNG figures")
    r.add_argument("--seed", default="0")
    r.add_argument("--timeout", type=float, default=120.0)
    r.add_argument("--tamper", help=argparse.SUPPRESS)  # FRAME[@role]: fault-injection harness
    r.set_defaults(func=cmd_run_ot)

    q = sub.add_parser("rates", help="OT rate and block-size tables")
    q.add_argument("--eps", default=",".join(f"{e:g}" for e in report.DEFAULT_EPS))
    q.add_argument("--loss-grid", default="0:10:0.5")
    q.add_argument("--params-file")
    q.add_argument("--out", default="rates.csv")
    q.add_argument("--plots")
    q.set_defaults(func=cmd_rates)

    m = sub.add_parser("match", help="private fingerprint matching")
    m.add_argument("--role", choices=(SENDER, RECEIVER))
    m.add_argument("--db")
    m.add_argument("--template")
    m.add_argument("--threshold", type=float, required=True)
    m.add_argument("--endpoint")
    m.add_argument("--transport", choices=("tcp", "loopback"), default="tcp")
    m.add_argument("--base-ots", help="run-ot results file holding 128 OTs of 128 bits")
    m.add_argument("--dealer-seed", help="sample base OTs locally (offline demo, no quantum source)")
    m.add_argument("--seed", default="0")
    m.add_argument("--timeout", type=float, default=600.0)
    m.set_defaults(func=cmd_match)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AbortExit as exc:
        print(f"abort: {exc.reason} {exc.detail}".rstrip(), file=sys.stderr)
        return EXIT_ABORT
    except ProtocolAbort as exc:
        print(f"abort: {exc.reason} {exc.detail}".rstrip(), file=sys.stderr)
        return EXIT_ABORT
    except (mpc.ExtensionError, TransportError) as exc:
        print(f"abort: protocol_violation {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, RawFormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
