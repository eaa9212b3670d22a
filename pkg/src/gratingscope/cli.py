"""Headless command-line driver: scans, retrieval, geometry checks, the
protocol REPL, dataset inspection and the control service.

Exit codes: 0 success, 1 runtime failure (including a geometry violation
for ``geometry check``), 2 invalid configuration or usage.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionEngine, Roi, shift_curve
from .config import SystemConfig, load_config
from .dataset import dataset_summary, load_dataset, save_phantom
from .errors import GratingscopeError
from .geometry import complete_geometry, validate_geometry
from .retrieval import run_retrieval, window_image, write_pgm


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="configuration file (INI)")
    parser.add_argument("--seed", type=int, metavar="U64", help="override the RNG seed")
    parser.add_argument("--out", metavar="DIR", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gratingscope",
        description="Simulated grating-interferometry imaging platform",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_scan = sub.add_parser("scan", help="run a simulated phase-stepping scan")
    _add_common(p_scan)
    p_scan.add_argument("--mode", choices=["a", "b", "A", "B"], help="scan mode")
    p_scan.add_argument("--steps", type=int, help="piezo steps over one period")
    p_scan.add_argument("--avg", type=int, help="frames to average per step")
    p_scan.add_argument("--exposure", type=float, help="exposure time per frame, s")
    p_scan.add_argument("--phantom", help="phantom kind (uniform|slab|disk|none) or file path")
    p_scan.add_argument("--no-correction", action="store_true",
                        help="skip offset/gain correction")

    p_ret = sub.add_parser("retrieve", help="Fourier retrieval from two datasets")
    _add_common(p_ret)
    p_ret.add_argument("sample", help="sample dataset directory")
    p_ret.add_argument("reference", help="reference dataset directory")
    p_ret.add_argument("--roi", metavar="X,Y,W,H", help="retrieval region of interest")
    p_ret.add_argument("--margin-rows", type=int,
                       help="drift-calibration margin strips (rows)")
    p_ret.add_argument("--window", metavar="LO,HI", default="1,99",
                       help="preview percentile window")

    p_geom = sub.add_parser("geometry", help="validate or complete the geometry")
    _add_common(p_geom)
    p_geom.add_argument("verb", choices=["check", "complete"])

    p_repl = sub.add_parser("protocol-repl",
                            help="speak raw controller commands interactively")
    _add_common(p_repl)
    p_repl.add_argument("--host", default="127.0.0.1")
    p_repl.add_argument("--port", type=int, help="controller TCP port")
    p_repl.add_argument("--local", action="store_true",
                        help="use an in-process controller instead of TCP")

    p_ds = sub.add_parser("dataset", help="inspect or verify a dataset directory")
    _add_common(p_ds)
    p_ds.add_argument("verb", choices=["info", "verify"])
    p_ds.add_argument("path", help="dataset directory")

    p_serve = sub.add_parser("serve", help="run the control service")
    _add_common(p_serve)
    p_serve.add_argument("--host", help="bind address")
    p_serve.add_argument("--port", type=int, help="HTTP port")
    p_serve.add_argument("--no-motor-sockets", action="store_true",
                         help="do not expose the controller TCP ports")

    p_ph = sub.add_parser("phantom", help="write a phantom directory")
    _add_common(p_ph)
    p_ph.add_argument("kind", choices=["uniform", "slab", "disk"])

    return parser


def _load_config(args) -> SystemConfig:
    return load_config(args.config) if args.config else load_config(None)


def cmd_scan(args) -> int:
    config = _load_config(args)
    if args.mode:
        config.scan.mode = args.mode.upper()
    if args.steps is not None:
        config.scan.steps = args.steps
    if args.avg is not None:
        config.scan.frames_to_average = args.avg
    if args.exposure is not None:
        config.scan.exposure_s = args.exposure
    if args.seed is not None:
        config.scan.seed = args.seed
    if args.phantom:
        if args.phantom in ("uniform", "slab", "disk", "none"):
            config.phantom.kind = args.phantom
        else:
            config.phantom.kind = "file"
            config.phantom.path = args.phantom

    beamline = config.build_beamline()
    beamline.set_tube(True, config.tube.voltage_kv, config.tube.current_ma)
    engine = AcquisitionEngine(beamline)
    if not args.no_correction:
        engine.measure_correction_maps()
    out_dir = Path(args.out or "scan-output")
    scan_config = config.scan.resolved(beamline.fringe.p2_equiv_um)
    ds = engine.run_scan(scan_config, out_dir=out_dir)

    print(f"dataset: {out_dir}  frames: {len(ds.entries)}  mode: {ds.mode}")
    print(f"{'arm':<10} {'step':>4} {'piezo um':>10} {'mean':>12}")
    band = Roi(ds.width * 7 // 16, 0, max(1, ds.width // 8), ds.height)
    for point in shift_curve(ds, band):
        print(f"{point.arm:<10} {point.step:>4} {point.piezo_um:>10.4f} {point.mean:>12.2f}")
    return 0


def cmd_retrieve(args) -> int:
    roi = None
    if args.roi:
        roi = Roi(*(int(v) for v in args.roi.split(",")))
    lo, hi = (float(v) for v in args.window.split(","))
    sample_ds = load_dataset(args.sample)
    reference_ds = load_dataset(args.reference)
    result = run_retrieval(sample_ds, reference_ds, roi=roi,
                           margin_rows=args.margin_rows)
    out_dir = Path(args.out or "retrieval-output")
    out_dir.mkdir(parents=True, exist_ok=True)
    from .dataset import save_result_maps

    diagnostics = {}
    for arm, stats in result.diagnostics.items():
        diagnostics[f"{arm}-period-steps"] = repr(stats.period_steps)
        diagnostics[f"{arm}-visibility"] = repr(stats.visibility)
        diagnostics[f"{arm}-start-phase"] = repr(stats.start_phase)
    save_result_maps(out_dir, {
        "transmission": result.transmission.astype(np.float32),
        "dpc": result.dpc.astype(np.float32),
        "darkfield": result.darkfield.astype(np.float32),
        "visibility-ref": result.visibility_ref.astype(np.float32),
        "valid": result.valid.astype(np.float32),
    }, diagnostics)
    for channel in ("transmission", "dpc", "darkfield"):
        image = window_image(getattr(result, channel), lo, hi, valid=result.valid)
        write_pgm(out_dir / f"{channel}.pgm", image)

    report = out_dir / "diagnostics.txt"
    lines = []
    for arm, stats in sorted(result.diagnostics.items()):
        lines.append(
            f"{arm}: period_steps={stats.period_steps:.4f} "
            f"visibility={stats.visibility:.6f} start_phase={stats.start_phase:.6f} "
            f"a0={stats.a0:.3f} a1={stats.a1:.3f}"
        )
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"results: {out_dir}")
    for line in lines:
        print(line)
    return 0


def cmd_geometry(args) -> int:
    config = _load_config(args)
    g = config.geometry
    unset = [name for name in ("p0", "p2", "l", "d") if getattr(g, name) is None]
    if args.verb == "complete":
        completed = complete_geometry(g)
        for name in ("p0", "p1", "p2", "l", "d", "wavelength"):
            marker = " (computed)" if name in unset else ""
            print(f"{name} = {getattr(completed, name):.9e}{marker}")
        return 0
    if unset:
        g = complete_geometry(g)
    check = validate_geometry(g)
    if check.ok:
        print(f"geometry ok (relative error {check.rel_error:.3e})")
        return 0
    print(f"geometry VIOLATION: relative error {check.rel_error:.6e}")
    return 1


def cmd_protocol_repl(args) -> int:
    from .protocol import Command, ControllerBank, parse_command

    def decode(reply: bytes) -> str:
        return reply.decode("ascii", errors="replace")

    if args.local:
        bank = ControllerBank()

        def transact(data: bytes) -> bytes:
            return bank.handle_bytes(1, data)
    else:
        if args.port is None:
            print("protocol-repl needs --port (or --local)", file=sys.stderr)
            return 2
        from .motorserver import send_command

        def transact(data: bytes) -> bytes:
            return send_command(args.host, args.port, data)

    print("enter '/'-terminated commands; empty line quits", file=sys.stderr)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            break
        data = line.encode("ascii", errors="replace")
        parsed = parse_command(data)
        annotation = (
            f"{parsed.kind.value}(axis={parsed.axis}, value={parsed.value})"
            if isinstance(parsed, Command)
            else f"parse_error at {parsed.position}: {parsed.reason}"
        )
        reply = transact(data)
        print(f"<- {decode(reply)}    [{annotation}]")
    return 0


def cmd_dataset(args) -> int:
    summary = dataset_summary(args.path)
    for key in ("name", "kind", "width", "height", "steps", "mode", "frames",
                "arms", "incomplete"):
        print(f"{key}: {summary[key]}")
    if args.verb == "verify":
        load_dataset(args.path)  # full read: sizes and checksums
        print("verify: ok (all frame files present, sizes and CRC32 match)")
    return 0


def cmd_phantom(args) -> int:
    config = _load_config(args)
    config.phantom.kind = args.kind
    beamline = config.build_beamline()
    out_dir = Path(args.out or f"phantom-{args.kind}")
    save_phantom(beamline.sample, out_dir)
    print(f"phantom: {out_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .motorserver import MotorServer
    from .service.app import create_app
    from .service.core import ControlService

    config = _load_config(args)
    if args.host:
        config.service.host = args.host
    if args.port is not None:
        config.service.port = args.port
    core = ControlService(config)
    motors = None
    if not args.no_motor_sockets:
        motors = MotorServer(core.bank, host=config.service.host,
                             base_port=config.service.motor_base_port, tick_hz=0)
        motors.start()
        print(f"motor controllers on ports "
              f"{config.service.motor_base_port}..{config.service.motor_base_port + 7}")
    frontend = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    app = create_app(core, frontend_dir=str(frontend))
    print(f"control service on http://{config.service.host}:{config.service.port}")
    try:
        uvicorn.run(app, host=config.service.host, port=config.service.port,
                    log_level="warning")
    finally:
        core.shutdown()
        if motors is not None:
            motors.stop()
    return 0


_HANDLERS = {
    "scan": cmd_scan,
    "retrieve": cmd_retrieve,
    "geometry": cmd_geometry,
    "protocol-repl": cmd_protocol_repl,
    "dataset": cmd_dataset,
    "phantom": cmd_phantom,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return _HANDLERS[args.command](args)
    except GratingscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
