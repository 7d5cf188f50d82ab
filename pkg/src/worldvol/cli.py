"""Command-line entry point: ``worldvol <subcommand> [options]``.

Exit codes: 0 ok, 2 usage or configuration error, 3 missing input, 4 non-finite numerics.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import autoencoder as ae_mod
from . import conditioning as cd
from . import data as data_mod
from . import generator as gen_mod
from . import io
from . import metrics as met
from . import volume as wv
from . import world_model as wm_mod
from .checkpoint import load_module, save_module
from .config import Config, ConfigError
from .numerics import NonFiniteError, set_deterministic

log = logging.getLogger("worldvol")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ENV = "WORLDVOL_CONFIG"
CHECKPOINT = "checkpoint"


class UsageError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# -- helpers ---------------------------------------------------------------------------

def _require(path, what: str) -> Path:
    if not path:
        raise MissingInput(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


_CREATED: list = []     # run directories made by the current invocation


def _new_run_dir(path) -> Path:
    p = Path(path)
    if p.exists():
        raise UsageError(f"refusing to overwrite existing run directory {p}")
    p.mkdir(parents=True)
    _CREATED.append(p)
    return p


def _load_config(args) -> Config:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        return Config()
    return Config.load(_require(path, "config file"))


def _finish(out: Path, cfg: Config, report: met.MetricsReport | None = None, losses: dict | None = None):
    cfg.save(out / "config.txt")
    report = report or met.MetricsReport()
    if losses:
        report.losses = losses
        (out / "losses.json").write_text(json.dumps(losses) + "\n")
    (out / "metrics.json").write_text(report.to_json())


def _dataset(directory, images: bool = True):
    directory = _require(directory, "dataset directory")
    names = io.sequence_names(directory)
    if not names:
        raise MissingInput(f"no .wseq files in {directory}")
    return [(n,) + io.load_sequence_dir(directory, n, images) for n in names]


def _split(items, cfg: Config):
    hold = min(cfg["run"].holdout, len(items) - 1)
    return (items[:len(items) - hold], items[len(items) - hold:]) if hold > 0 else (items, [])


def _run_dir(flag, default, what):
    return _require(flag or default, what)


def load_autoencoder(run) -> ae_mod.VolumeAutoencoder:
    run = _require(run, "autoencoder run")
    cfg = Config.load(_require(run / "config.txt", "autoencoder config"))
    model = ae_mod.VolumeAutoencoder(cfg["ae"])
    return load_module(model, _require(run / CHECKPOINT, "autoencoder checkpoint")).eval()


def load_world_model(ae_run, wm_run) -> wm_mod.WorldModel:
    run = _require(wm_run, "world-model run")
    cfg = Config.load(_require(run / "config.txt", "world-model config"))
    net = wm_mod.WorldNoisePredictor(cfg["wm"])
    load_module(net, _require(run / CHECKPOINT, "world-model checkpoint"))
    return wm_mod.WorldModel(load_autoencoder(ae_run), net.eval())


def load_generator(run) -> gen_mod.PanopticGenerator:
    run = _require(run, "generator run")
    cfg = Config.load(_require(run / "config.txt", "generator config"))
    model = gen_mod.PanopticGenerator(cfg["gen"])
    return load_module(model, _require(run / CHECKPOINT, "generator checkpoint")).eval()


def _weather(prompt: str) -> str:
    return gen_mod.weather_of(prompt) if prompt else "sunny"


# -- subcommands -----------------------------------------------------------------------

def cmd_gen_data(args, cfg: Config):
    d = cfg["data"]
    out = _new_run_dir(args.out)
    for i in range(d.n_sequences):
        s = data_mod.make_sample(d.seed + i, d.n_frames, d.render, d.layout or None, d.weather or None,
                                 d.velocity if d.velocity >= 0 else None)
        io.save_sequence_dir(out, f"seq{i}", s.sequence, s.images, s.prompt)
    _finish(out, cfg)


def cmd_train_ae(args, cfg: Config):
    items = _dataset(args.data, images=False)
    out = _new_run_dir(args.out)
    train, held = _split(items, cfg)
    vols = [v for _, seq, _, _ in train for v in seq.frames]
    model, hist = ae_mod.train_autoencoder(vols, cfg["ae"], log_every=args.log_every)
    save_module(model, out / CHECKPOINT)
    report = met.MetricsReport()
    if held:
        test = [v for _, seq, _, _ in held for v in seq.frames]
        recon = model.decode_volumes(model.encode_volumes(test), test)
        report.voxel_iou = met.volume_ious(recon, test)
    _finish(out, cfg, report, {"ae": hist})


def cmd_train_wm(args, cfg: Config):
    items = _dataset(args.data, images=False)
    ae = load_autoencoder(_run_dir(args.ae, cfg["run"].ae_run, "autoencoder run"))
    out = _new_run_dir(args.out)
    train, held = _split(items, cfg)
    model, hist = wm_mod.train_world_model(ae, [seq for _, seq, _, _ in train], cfg["wm"],
                                           log_every=args.log_every)
    save_module(model.net, out / CHECKPOINT)
    losses = {"wm": hist}
    if held:
        w = wm_mod.sequence_windows([seq for _, seq, _, _ in held], cfg["wm"].n_past, cfg["wm"].n_future)
        if w:
            losses["wm_heldout"] = [wm_mod.heldout_loss(model, wm_mod.encode_windows(ae, w))]
    _finish(out, cfg, None, losses)


def _gen_examples(items):
    out = []
    for _, seq, frames, prompt in items:
        if len(frames) != len(seq):
            raise MissingInput("generator training needs rendered images for every frame")
        out.append([gen_mod.make_example(v, prompt, f) for v, f in zip(seq.frames, frames)])
    return out


def cmd_train_gen(args, cfg: Config):
    items = _dataset(args.data)
    out = _new_run_dir(args.out)
    train, _ = _split(items, cfg)
    examples = [e for clip in _gen_examples(train) for e in clip]
    model, hist = gen_mod.train_generator(examples, cfg["gen"], log_every=args.log_every)
    save_module(model, out / CHECKPOINT)
    _finish(out, cfg, None, {"gen": hist})


def cmd_finetune_temporal(args, cfg: Config):
    base = _run_dir(args.gen, cfg["run"].gen_run, "generator run")
    model = load_generator(base)
    items = _dataset(args.data)
    out = _new_run_dir(args.out)
    train, _ = _split(items, cfg)
    gcfg = Config.load(base / "config.txt")["gen"]
    gcfg.temporal_steps, gcfg.temporal_lr = cfg["gen"].temporal_steps, cfg["gen"].temporal_lr
    gcfg.clip_frames = cfg["gen"].clip_frames
    hist, before, after = gen_mod.finetune_temporal(model, _gen_examples(train), gcfg, args.log_every)
    if before != after:
        raise RuntimeError("frozen parameters changed during temporal finetuning")
    save_module(model, out / CHECKPOINT)
    cfg.sections["gen"] = gcfg      # architecture comes from the base run
    (out / "frozen_hash.txt").write_text(after + "\n")
    _finish(out, cfg, None, {"temporal": hist})


def cmd_rollout(args, cfg: Config):
    init = wv.load_sequence(_require(args.init, "initial sequence"))
    model = load_world_model(_run_dir(args.ae, cfg["run"].ae_run, "autoencoder run"),
                             _run_dir(args.wm, cfg["run"].wm_run, "world-model run"))
    horizon = args.horizon or cfg["run"].horizon
    n_past = model.cfg.n_past
    if len(init) < n_past:
        raise UsageError(f"initial sequence has {len(init)} frames, need {n_past}")
    stream = list(init.actions[n_past:n_past + horizon])
    stream += [init.actions[-1]] * (horizon - len(stream))
    out = _new_run_dir(args.out)
    gen = torch.Generator().manual_seed(cfg["run"].seed)
    seq = model.rollout(init.frames[:n_past], init.actions[:n_past], stream, horizon, gen, init.dt)
    wv.save_sequence(seq, out / f"{Path(args.init).stem}.wseq")
    report = met.MetricsReport()
    if len(init) >= len(seq):
        report.voxel_iou = met.volume_ious(seq.frames[n_past:], init.frames[n_past:len(seq)])
    _finish(out, cfg, report)


def cmd_render_conditioning(args, cfg: Config):
    volume = wv.load(_require(args.input, "input volume"))
    gen_run = args.gen or cfg["run"].gen_run
    model = load_generator(gen_run) if gen_run else gen_mod.PanopticGenerator(cfg["gen"])
    out = _new_run_dir(args.out)
    ex = gen_mod.make_example(volume, gen_mod.sim.PROMPT_TEMPLATE.format(
        weather="sunny", location="town", environment="suburb"), None, model.rig)
    with torch.no_grad():
        pano = model.conditioner(ex.occupancy[None], ex.map_index[None])[0]
    for c in range(pano.shape[0]):
        io.write_ppm(out / f"feature_{c:02d}.ppm", io.to_gray(pano[c].numpy()))
    for k, cls in enumerate(cd.GUIDED_CLASSES):
        io.write_ppm(out / f"mask_{wv.CLASSES[cls].name}.ppm", ex.masks[k].numpy().astype(np.uint8) * 255)
    _finish(out, cfg)


def _parse_ints(text: str, n: int, what: str):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be {n} comma-separated integers") from None
    if len(vals) != n:
        raise UsageError(f"{what} must be {n} comma-separated integers")
    return vals


def _class_id(name: str) -> int:
    for c in wv.CLASSES:
        if c.name == name:
            return c.id
    raise UsageError(f"unknown class {name!r}")


def cmd_edit(args, cfg: Config):
    volume = wv.load(_require(args.input, "input volume"))
    out = Path(args.out)
    if out.exists():
        raise UsageError(f"refusing to overwrite {out}")
    if bool(args.remove_box) == bool(args.insert_box):
        raise UsageError("give exactly one of --remove-box or --insert-box")
    if args.remove_box:
        x0, y0, z0, x1, y1, z1 = _parse_ints(args.remove_box, 6, "--remove-box")
        classes = [_class_id(args.cls)] if args.cls else None
        edited = wv.edit_remove_object(volume, (z0, y0, x0), (z1, y1, x1), classes)
    else:
        x, y, yaw = _parse_ints(args.insert_box, 3, "--insert-box")
        tz, ty, tx = _parse_ints(args.size, 3, "--size")
        template = np.full((tz, ty, tx), _class_id(args.cls or "vehicle"), np.uint8)
        edited = wv.edit_insert_object(volume, template, (x, y, yaw))
    wv.save(edited, out)


def cmd_sample_video(args, cfg: Config):
    seq_path = _require(args.seq, "world-volume sequence")
    seq = wv.load_sequence(seq_path)
    model = load_generator(_run_dir(args.gen, cfg["run"].gen_run, "generator run"))
    prompt = args.prompt
    if not prompt:
        pfile = seq_path.parent / seq_path.stem / "prompt.txt"
        prompt = pfile.read_text().strip() if pfile.exists() else gen_mod.sim.PROMPT_TEMPLATE.format(
            weather="sunny", location="town", environment="suburb")
    out = _new_run_dir(args.out)
    frames = seq.frames[:args.frames] if args.frames else seq.frames
    examples = gen_mod.examples_for_sequence(frames, prompt, model.rig)
    video = gen_mod.sample_video(model, examples, seed=cfg["run"].seed, temporal=not args.no_temporal)
    sub = wv.WorldVolumeSequence(list(frames), list(seq.actions[:len(frames)]), seq.dt)
    io.save_sequence_dir(out, seq_path.stem, sub, video, prompt)
    report = met.MetricsReport(consistency=met.frame_consistency(video))
    _finish(out, cfg, report)


def compute_metrics(run_dir, ref_dir) -> met.MetricsReport:
    run_dir, ref_dir = _require(run_dir, "run directory"), _require(ref_dir, "reference directory")
    names = io.sequence_names(run_dir)
    if not names:
        raise MissingInput(f"no .wseq files in {run_dir}")
    report = met.MetricsReport()
    ious, agree, cons, cross, shift = [], [], [], [], []
    for name in names:
        if not (ref_dir / f"{name}.wseq").exists():
            raise met.InventoryMismatch(f"reference lacks {name}")
        run_seq, run_frames, run_prompt = io.load_sequence_dir(run_dir, name)
        ref_seq, ref_frames, ref_prompt = io.load_sequence_dir(ref_dir, name)
        if len(run_seq) != len(ref_seq):
            raise met.InventoryMismatch(f"{name}: {len(run_seq)} vs {len(ref_seq)} frames")
        ious.append(met.volume_ious(run_seq.frames, ref_seq.frames))
        if run_frames:
            wr, wq = _weather(run_prompt), _weather(ref_prompt)
            a, s = met.compare_frames(run_frames, wr, ref_frames, wq)
            agree.append(a)
            shift.append(s)
            cons.append(abs(met.frame_consistency(run_frames) - met.frame_consistency(ref_frames)))
            cross.extend(v for v in (met.cross_view_agreement(f, wr, vol)
                                     for f, vol in zip(run_frames, ref_seq.frames)) if np.isfinite(v))
    report.voxel_iou = {k: float(np.mean([d[k] for d in ious])) for k in ious[0]}
    if agree:
        report.pixel_agreement = float(np.mean(agree))
        report.tint_shift = float(np.mean(shift))
        report.consistency = float(np.mean(cons))
        report.cross_view_agreement = float(np.mean(cross)) if cross else None
    lf = run_dir / "losses.json"
    if lf.exists():
        report.losses = json.loads(lf.read_text())
    return report


def cmd_metrics(args, cfg: Config):
    report = compute_metrics(args.run, args.ref)
    if args.out:
        out = _new_run_dir(args.out)
        _finish(out, cfg, report, None)
    sys.stdout.write(report.to_json())


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="worldvol", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help=f"flat key=value config (default: ${CONFIG_ENV} or built-ins)")
        sp.add_argument("--log-every", type=int, default=100)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "simulate sequences, renders and prompts")
    sp.add_argument("--out", required=True)
    sp = add("train-ae", cmd_train_ae, "train the volume autoencoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp = add("train-wm", cmd_train_wm, "train the world-model noise predictor")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ae")
    sp.add_argument("--out", required=True)
    sp = add("train-gen", cmd_train_gen, "train the single-frame panoptic generator")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp = add("finetune-temporal", cmd_finetune_temporal, "train only the temporal attention stages")
    sp.add_argument("--data", required=True)
    sp.add_argument("--gen")
    sp.add_argument("--out", required=True)
    sp = add("rollout", cmd_rollout, "autoregressive world-volume prediction")
    sp.add_argument("--init", required=True)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--ae")
    sp.add_argument("--wm")
    sp.add_argument("--out", required=True)
    sp = add("render-conditioning", cmd_render_conditioning, "write F_pano channels and guidance masks")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--gen")
    sp.add_argument("--out", required=True)
    sp = add("edit", cmd_edit, "insert or remove objects in a .wvol")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--remove-box", help="x0,y0,z0,x1,y1,z1 voxel indices (half-open)")
    sp.add_argument("--insert-box", help="x,y,yaw_deg of the box footprint corner")
    sp.add_argument("--size", default="3,4,9", help="box extent tz,ty,tx in voxels")
    sp.add_argument("--class", dest="cls")
    sp = add("sample-video", cmd_sample_video, "generate multi-camera frames for a sequence")
    sp.add_argument("--seq", required=True)
    sp.add_argument("--gen")
    sp.add_argument("--prompt")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--no-temporal", action="store_true")
    sp.add_argument("--out", required=True)
    sp = add("metrics", cmd_metrics, "compare a run directory with a reference dataset")
    sp.add_argument("--run", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    _CREATED.clear()
    try:
        return _dispatch(parser, args)
    except BaseException:
        # a failed invocation leaves no half-written run directory behind
        for p in _CREATED:
            shutil.rmtree(p, ignore_errors=True)
        raise
    finally:
        _CREATED.clear()


def _dispatch(parser, args) -> int:
    code = EXIT_OK
    try:
        cfg = _load_config(args)
        set_deterministic()
        torch.manual_seed(cfg["run"].seed)
        log.info("resolved config (run id %s):\n%s", cfg.run_id(), cfg.to_text())
        args.func(args, cfg)
    except (MissingInput, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_MISSING
    except NonFiniteError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (UsageError, ConfigError, met.InventoryMismatch, wv.EditError) as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        code = EXIT_USAGE
    if code != EXIT_OK:
        for p in _CREATED:
            shutil.rmtree(p, ignore_errors=True)
    return code


if __name__ == "__main__":
    sys.exit(main())
