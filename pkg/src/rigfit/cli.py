"""``rigfit`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
Log records go to stderr one JSON object per line; artifacts go to ``--out``.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import num_threads
from .fitting import (FitConfig, FitError, FitResult, FitState, Model, evaluate, fit_cloud, fit_landmarks_2d,
                      fit_stage1_linear, fit_test_time, MeshTarget, load_fit_state, retarget, save_fit_result,
                      transfer_slots)
from .geometry import GeometryError, Mesh, PointCloud
from .losses import Camera, LossError
from .meshio import load_mesh, load_point_cloud, save_mesh, save_point_cloud
from .neural import (CheckpointError, Critic, DecoderConfig, DivergenceError, SkinDecoder, SkinEncoder,
                     TrainLog, TrainSchedule, finetune_decoder_gan_phase, load_checkpoint, reconstruction_l1,
                     save_checkpoint, train_autoencoder_phase)
from .rig import RigError
from .rigio import load_rig, rig_schema, save_rig, save_weights
from .synth import (CorpusSpec, ToyRigConfig, harvest_transform_corpus, load_corpus, make_identities,
                    make_toy_rig, save_corpus, synth_scan, synthesize_samples, weight_modes)

log = logging.getLogger("rigfit")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class _JsonLines(logging.Formatter):
    def format(self, record):
        rec = {"t": round(record.created, 3), "level": record.levelname.lower(), "event": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        return json.dumps(rec, default=float)


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(level.upper())
    log.propagate = False


def emit(event, **fields):
    log.info(event, extra={"fields": fields})


class _LogSink:
    """File-like adapter so training records are mirrored to the log stream."""

    def __init__(self, fh):
        self.fh = fh

    def write(self, line):
        self.fh.write(line)
        rec = json.loads(line)
        if rec.get("step", 0) % 100 == 0:
            emit("train", **rec)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _existing(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} path does not exist: {p}")
    return p


def _out_dir(args):
    if args.out is None:
        raise UsageError("--out is required")
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_config(args):
    """Config file (JSON) merged under explicit ``--set key=value`` flags."""
    cfg = {}
    if getattr(args, "config", None):
        p = _existing(args.config, "config")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {p}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config {p}: expected a JSON object")
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    return cfg


def _fit_config(args, extra=None):
    cfg = _load_config(args)
    cfg = {k: v for k, v in cfg.items() if k not in ("schedule", "corpus", "toy")}
    cfg.setdefault("seed", args.seed)
    cfg.update(extra or {})
    try:
        return FitConfig.from_mapping(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"fit config: {exc}") from None


def _load_scans(paths):
    scans = []
    for p in paths:
        p = _existing(p, "scans")
        files = sorted(p.glob("*.obj")) if p.is_dir() else [p]
        scans += [load_mesh(f) for f in files]
    if not scans:
        raise UsageError("no scan meshes found")
    return scans


def _load_rig(args):
    rig_dir = _existing(args.rig, "rig")
    weights = _existing(args.weights, "weights") if getattr(args, "weights", None) else None
    return load_rig(rig_dir, weights)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_toy(args):
    if args.joints < 1:
        raise UsageError("--joints must be at least 1")
    if args.subdivision < 2:
        raise UsageError("--subdivision must be at least 2 (50+ vertices)")
    out = _out_dir(args)
    config = ToyRigConfig(subdivision=args.subdivision, joints=args.joints, symmetric=not args.asymmetric,
                          expressions=args.expressions, seed=args.seed)
    rig = make_toy_rig(config)
    save_rig(rig, out)
    _write_json(out / "toy_config.json", config.to_dict())
    emit("rig written", dir=str(out), vertices=rig.mesh.n_vertices, joints=rig.skeleton.K,
         pose_size=rig.layout.size, weight_classes=rig.weights.n_classes)
    if args.scans:
        rng = np.random.default_rng(args.seed)
        modes = weight_modes(rig, args.modes, rng) if args.modes else None
        ids = make_identities(rig, args.scans, rng, modes=modes, mode_scale=args.mode_scale,
                              pose_scale=args.pose_scale)
        sdir = out / "scans"
        sdir.mkdir(exist_ok=True)
        truth = []
        for i, (pose, free, verts) in enumerate(zip(ids.poses, ids.free, ids.vertices)):
            save_mesh(Mesh(verts, rig.mesh.faces), sdir / f"scan_{i:03d}.obj")
            coeffs = np.zeros(rig.n_expressions)
            if args.cloud_points:
                cloud = synth_scan(rig, pose, args.noise * rig.mesh.bbox_diagonal(), args.dropout,
                                   args.cloud_points, rng, free=free)
                save_point_cloud(cloud, sdir / f"scan_{i:03d}.xyz")
            truth.append({"pose": pose.tolist(), "free": free.tolist(), "coeffs": coeffs.tolist()})
        _write_json(sdir / "truth.json", truth)
        emit("scans written", count=args.scans, dir=str(sdir))
    return EXIT_OK


def cmd_train_linear(args):
    rig = _load_rig(args)
    scans = _load_scans(args.scans)
    config = _fit_config(args)
    out = _out_dir(args)
    emit("stage 1 start", scans=len(scans), cycles=config.stage1_cycles)
    t0 = time.time()
    result = fit_stage1_linear(rig, scans, config)
    hist = result.history
    save_weights(rig.weights.with_params(result.free_params), out / "weights.json")
    _write_json(out / "poses.json", [p.tolist() for p in result.poses])
    with open(out / "loss_log.jsonl", "w") as fh:
        for step, val in enumerate(hist):
            fh.write(json.dumps({"step": step, "loss": val}) + "\n")
    errs = [float(np.linalg.norm(rig.deform(p, result.free_params) - s.vertices, axis=1).mean())
            for p, s in zip(result.poses, scans)]
    emit("stage 1 done", seconds=round(time.time() - t0, 2), loss_first=hist[0] if hist else None,
         loss_last=hist[-1] if hist else None, mean_vertex_error=float(np.mean(errs)))
    return EXIT_OK


def cmd_synth(args):
    rig = _load_rig(args)
    scans = _load_scans(args.scans)
    config = _fit_config(args)
    ratios = tuple(args.split)
    try:
        spec = CorpusSpec(args.snapshots, args.cycles, args.perturb, args.perturb_fraction, args.perturb_sparsity,
                          ratios, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args)
    emit("harvest start", scans=len(scans), expected_poses=spec.expected_poses(len(scans)))
    corpus = harvest_transform_corpus(rig, scans, spec, config)
    workers = num_threads()
    samples = synthesize_samples(rig, corpus, scans, config, workers=workers)
    try:
        manifest = save_corpus(out, corpus, samples, spec, {"seed": args.seed, "fit_config": config.to_dict(),
                                                            "n_scans": len(scans)})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    emit("corpus written", dir=str(out), poses=manifest["n_poses"],
         max_sample_loss=max(manifest["sample_loss"]), workers=workers)
    return EXIT_OK


def cmd_train_neural(args):
    corpus_dir = _existing(args.corpus, "corpus")
    try:
        manifest, _, samples, linear = load_corpus(corpus_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"corpus {corpus_dir}: {exc}") from None
    cfg = _load_config(args).get("schedule", {})
    try:
        schedule = TrainSchedule(**{**cfg, **{k: v for k, v in (
            ("ae_steps", args.ae_steps), ("gan_steps", args.gan_steps), ("batch_size", args.batch_size))
            if v is not None}})
    except TypeError as exc:
        raise UsageError(f"schedule: {exc}") from None
    if args.skip_gan:
        schedule.gan_steps = 0
    train_idx = np.asarray(manifest["splits"]["train"], dtype=np.int64)
    data = samples[train_idx] if len(train_idx) else samples
    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    if args.paper_scale:
        dcfg = DecoderConfig.paper_scale()
        if dcfg.out_dim != data.shape[1]:
            raise UsageError(f"paper-scale decoder emits {dcfg.out_dim} values, corpus has {data.shape[1]}")
    else:
        dcfg = DecoderConfig.for_output(data.shape[1], args.latent, args.width)
    decoder = SkinDecoder(dcfg, rng)
    encoder = SkinEncoder(data.shape[1], dcfg.latent_dim, rng)
    critic = Critic(data.shape[1], min(50, dcfg.latent_dim * 2), args.critic_width, rng)
    with open(out / "train_log.jsonl", "w") as fh:
        tlog = TrainLog(sink=_LogSink(fh))
        before = reconstruction_l1(encoder, decoder, data, linear)
        train_autoencoder_phase(encoder, decoder, critic, data, linear, schedule, rng, tlog)
        after = reconstruction_l1(encoder, decoder, data, linear)
        emit("autoencoder phase done", recon_l1_before=before, recon_l1_after=after)
        if schedule.gan_steps > 0:
            finetune_decoder_gan_phase(decoder, critic, data, linear, schedule, rng, tlog)
            emit("gan phase done", steps=schedule.gan_steps)
    save_checkpoint(decoder, out / "decoder.bin")
    _write_json(out / "train_summary.json", {"recon_l1_before": before, "recon_l1_after": after,
                                             "decoder_params": decoder.param_count(),
                                             "skip_gan": bool(args.skip_gan), "schedule": schedule.__dict__})
    return EXIT_OK


def _load_model(args, rig):
    decoder = None
    if args.decoder:
        decoder = load_checkpoint(_existing(args.decoder, "decoder"), expected_out_dim=rig.weights.n_classes)
    return Model(rig, rig.weights.free_params, decoder)


def cmd_fit(args):
    rig = _load_rig(args)
    model = _load_model(args, rig)
    config = _fit_config(args)
    out = _out_dir(args)
    target_path = _existing(args.target, "target")
    if args.mode == "cloud":
        cloud = load_point_cloud(target_path)
        result = fit_cloud(model, cloud, config)
    elif args.mode == "mesh":
        result = fit_test_time(model, MeshTarget(load_mesh(target_path)), config)
    else:
        spec = json.loads(target_path.read_text())
        cam_path = _existing(args.camera, "camera")
        cam = json.loads(cam_path.read_text())
        try:
            camera = Camera(**cam)
            result = fit_landmarks_2d(model, spec["vertices"], spec["pixels"], camera, config)
        except (TypeError, KeyError) as exc:
            raise UsageError(f"landmark/camera file: {exc}") from None
        pixels = camera.project(result.vertices[np.asarray(spec["vertices"])])
        result.curves["reprojection_px"] = [float(np.mean(np.linalg.norm(pixels - np.asarray(spec["pixels"]),
                                                                         axis=1)))]
    save_fit_result(result, out / "fit.json")
    save_mesh(rig.mesh.with_vertices(result.vertices), out / "fitted.obj")
    if result.report is not None:
        _write_json(out / "report.json", result.report.as_dict())
        emit("fit done", mode=args.mode, **result.report.as_dict())
    else:
        emit("fit done", mode=args.mode, reprojection_px=result.curves["reprojection_px"][0])
    return EXIT_OK


def cmd_eval(args):
    mesh = load_mesh(_existing(args.mesh, "mesh"))
    ref_path = _existing(args.reference, "reference")
    if ref_path.suffix.lower() == ".obj":
        reference = load_mesh(ref_path)
    else:
        reference = load_point_cloud(ref_path)
    report = evaluate(mesh.vertices, reference, mesh.faces)
    text = json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n"
    if args.out:
        (_out_dir(args) / "report.json").write_text(text)
    else:
        sys.stdout.write(text)
    emit("eval done", kind="scan_to_mesh" if isinstance(reference, PointCloud) else "point_to_point",
         **report.as_dict())
    return EXIT_OK


def cmd_retarget(args):
    source_rig = load_rig(_existing(args.source_rig, "source-rig"))
    target_rig = _load_rig(args)
    if rig_schema(source_rig) != rig_schema(target_rig):
        raise UsageError("source and target rigs have different joint/expression schemas")
    model = _load_model(args, target_rig)
    source = load_fit_state(_existing(args.source_fit, "source-fit"))
    if args.target_fit:
        target_state = load_fit_state(_existing(args.target_fit, "target-fit"))
    else:
        target_state = FitState(target_rig.layout.identity(),
                                None if model.decoder is None else np.zeros(model.decoder.latent_dim),
                                np.zeros(target_rig.n_expressions) if target_rig.n_expressions else None)
    names = [j.name for j in target_rig.skeleton.joints]
    if args.joints == ["all"]:
        joints = list(range(len(names)))
    else:
        unknown = [j for j in args.joints if j not in names]
        if unknown:
            raise UsageError(f"unknown joints {unknown}")
        joints = [names.index(j) for j in args.joints]
    slots = transfer_slots(target_rig.layout, joints, root=not args.no_root)
    if len(source.pose) != target_rig.layout.size:
        raise UsageError("source fit does not match the target pose layout")
    verts, state = retarget(source, model, target_state, slots)
    out = _out_dir(args)
    save_mesh(target_rig.mesh.with_vertices(verts), out / "retargeted.obj")
    save_fit_result(FitResult(state, verts, None, {}), out / "retargeted_fit.json")
    emit("retarget done", slots=len(slots))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="rigfit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rigfit {__version__}")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help="artifact directory")
        sp.add_argument("--seed", type=int, default=0)
        if config:
            sp.add_argument("--config", help="JSON config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config key (JSON value); repeatable, wins over --config")

    t = sub.add_parser("make-toy", help="write a procedural toy rig (and optional synthetic scans)")
    common(t, config=False)
    t.add_argument("--joints", type=int, default=12)
    t.add_argument("--subdivision", type=int, default=2)
    t.add_argument("--expressions", type=int, default=4)
    t.add_argument("--asymmetric", action="store_true", help="no mirrored joint pairs")
    t.add_argument("--scans", type=int, default=0, help="synthetic identity scans to write")
    t.add_argument("--modes", type=int, default=3, help="random weight modes for identities")
    t.add_argument("--mode-scale", type=float, default=1.0)
    t.add_argument("--pose-scale", type=float, default=0.5)
    t.add_argument("--cloud-points", type=int, default=0, help="also write a point cloud per scan")
    t.add_argument("--noise", type=float, default=0.0, help="cloud noise sigma as a fraction of the bbox diagonal")
    t.add_argument("--dropout", type=float, default=0.0)
    t.set_defaults(func=cmd_make_toy)

    t = sub.add_parser("train-linear", help="stage 1: fit poses and one shared linear weight set")
    common(t)
    t.add_argument("--rig", required=True)
    t.add_argument("--weights", help="initial weight file (default: the rig's)")
    t.add_argument("--scans", nargs="+", required=True, help="OBJ files or directories of them")
    t.set_defaults(func=cmd_train_linear)

    t = sub.add_parser("synth", help="harvest poses and synthesize the skinning-weight corpus")
    common(t)
    t.add_argument("--rig", required=True)
    t.add_argument("--weights")
    t.add_argument("--scans", nargs="+", required=True)
    t.add_argument("--snapshots", type=int, default=4)
    t.add_argument("--cycles", type=int, default=2)
    t.add_argument("--perturb", type=int, default=3)
    t.add_argument("--perturb-fraction", type=float, default=0.05)
    t.add_argument("--perturb-sparsity", type=float, default=0.2)
    t.add_argument("--split", type=float, nargs=3, default=(0.906, 0.021, 0.073), metavar=("TRAIN", "VAL", "TEST"))
    t.set_defaults(func=cmd_synth)

    t = sub.add_parser("train-neural", help="train the skinning decoder (autoencoder then GAN phase)")
    common(t)
    t.add_argument("--corpus", required=True)
    t.add_argument("--ae-steps", type=int)
    t.add_argument("--gan-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--latent", type=int, default=16)
    t.add_argument("--width", type=int, default=8)
    t.add_argument("--critic-width", type=int, default=64)
    t.add_argument("--paper-scale", action="store_true", help="use the full-size decoder layout")
    t.add_argument("--skip-gan", action="store_true")
    t.set_defaults(func=cmd_train_neural)

    t = sub.add_parser("fit", help="test-time fit to a cloud, mesh or 2D landmarks")
    common(t)
    t.add_argument("--rig", required=True)
    t.add_argument("--weights", help="linear weight file (default: the rig's)")
    t.add_argument("--decoder", help="decoder checkpoint; enables the latent phase")
    t.add_argument("--mode", choices=["cloud", "mesh", "landmarks"], default="cloud")
    t.add_argument("--target", required=True, help="cloud (XYZ/PLY), mesh (OBJ) or landmark JSON")
    t.add_argument("--camera", help="camera JSON for --mode landmarks")
    t.set_defaults(func=cmd_fit)

    t = sub.add_parser("eval", help="error report of a mesh against a mesh or cloud (no alignment)")
    common(t, config=False)
    t.add_argument("--mesh", required=True)
    t.add_argument("--reference", required=True)
    t.set_defaults(func=cmd_eval)

    t = sub.add_parser("retarget", help="transfer pose and expressions from one fit onto another identity")
    common(t, config=False)
    t.add_argument("--source-rig", required=True)
    t.add_argument("--source-fit", required=True)
    t.add_argument("--rig", required=True, help="target rig directory")
    t.add_argument("--weights", help="target weight file")
    t.add_argument("--decoder")
    t.add_argument("--target-fit", help="target identity fit (default: neutral)")
    t.add_argument("--joints", nargs="+", default=["all"], help="joint names whose DOFs transfer")
    t.add_argument("--no-root", action="store_true", help="keep the target's global pose")
    t.set_defaults(func=cmd_retarget)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, RigError, GeometryError, CheckpointError, LossError, json.JSONDecodeError,
            KeyError) as exc:
        log.error(str(exc), extra={"fields": {"kind": type(exc).__name__, "exit": EXIT_USAGE}})
        return EXIT_USAGE
    except (FitError, DivergenceError, FloatingPointError) as exc:
        log.error(str(exc), extra={"fields": {"kind": type(exc).__name__, "exit": EXIT_NUMERIC}})
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
