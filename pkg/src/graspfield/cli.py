"""Command line pipeline: synthesize scenes, fit the codec, train,
reconstruct, evaluate, and run ablations over one data directory.

Layout under the data root:

    scenes/scene_00000/      one saved scene bundle per index
    manifest.json            per-scene status written by gen-data
    codec.codc               linear codec fitted on scene grids
    denoiser.tdnz            trained velocity network (optional)
    train_log.jsonl          step records from training
    recon/scene_00000/       recon.sdfg, recon.ply, trajectory.jsonl
    report/                  report.csv, report.json, fig_<metric>.png
    ablation/                ablation.csv, ablation.json, fig_ablation.png

Every command is deterministic for a fixed seed, independent of the
worker count: scene i always draws from a stream keyed by (seed, i).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import (ConfigError, RunConfig, apply_overrides, load_config,
                     sampler_for_run)
from .denoiser import (FinetuneScene, load_denoiser, save_denoiser,
                       train_denoiser)
from .grids import load_sdfg, save_sdfg
from .latent import (condition_library, encode, fit_codec, library_from_grids,
                     load_codec, oracle_velocity, save_codec)
from .meshing import extract_surface, save_ply
from .metrics import EvalSample, evaluate_sample, stratified_report, voxel_iou
from .sampler import sample, save_trajectory
from .scenes import (GenerationError, build_scene, load_scene, render_masks,
                     save_scene, scene_rng)
from .suites import COND_MODES, DEFAULT_STRENGTHS, evidence_fn
from .touch import build_touch_tensor, perturb_contacts

SCENE_DIR_FMT = "scene_{:05d}"

__all__ = ["main", "build_parser"]


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="JSON run configuration file")
    p.add_argument("--data-root", type=Path, default=None,
                   help="dataset directory (default: $GRASPFIELD_DATA_ROOT "
                        "or ./data)")
    p.add_argument("--out-dir", type=Path, default=None,
                   help="output directory (default: the data root)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--n-scenes", type=int, default=None)
    p.add_argument("--guidance", choices=("on", "off"), default=None,
                   help="contact-aware guidance during sampling")
    p.add_argument("--ablation", choices=COND_MODES, default=None,
                   help="conditioning mode for reconstruction")
    p.add_argument("--touch-noise-mm", type=float, default=None,
                   help="contact sensor noise radius in millimetres")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="graspfield",
        description="grasp-conditioned shape reconstruction pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("gen-data", "synthesize and save grasp scenes"),
            ("fit-codec", "fit the linear shape codec on saved scenes"),
            ("train", "train the latent velocity network"),
            ("reconstruct", "sample reconstructions for each scene"),
            ("evaluate", "score reconstructions and write the report"),
            ("ablate", "compare conditioning modes on reconstruction"),
            ("selftest", "run the built-in verification suites")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    return ap


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    guidance = None if args.guidance is None else args.guidance == "on"
    return apply_overrides(
        cfg, command=args.command, data_root=args.data_root,
        out_dir=args.out_dir, seed=args.seed, workers=args.workers,
        guidance=guidance, ablation=args.ablation,
        touch_noise_mm=args.touch_noise_mm, n_scenes=args.n_scenes)


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) if cfg.out_dir is not None else Path(cfg.data_root)


# ---------------------------------------------------------------------------
# manifest helpers

def _scene_dir(root: Path, index: int) -> Path:
    return Path(root) / "scenes" / SCENE_DIR_FMT.format(index)


def _write_manifest(root: Path, entries: List[dict], cfg: RunConfig) -> None:
    doc = {
        "n_scenes": len(entries),
        "seed": cfg.seed,
        "resolution": cfg.scene.resolution,
        "mask_size": cfg.scene.mask_size,
        "scenes": entries,
    }
    with open(Path(root) / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2)


def _read_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(
            f"{path} not found; run gen-data first")
    with open(path) as fh:
        return json.load(fh)


def _ok_indices(manifest: dict) -> List[int]:
    return [e["index"] for e in manifest["scenes"] if e["status"] == "ok"]


# ---------------------------------------------------------------------------
# gen-data

def _gen_one(cfg: RunConfig, index: int) -> dict:
    """Build and save scene `index`; failures become manifest entries."""
    rng = scene_rng(cfg.seed, index)
    entry = {"index": index, "dir": f"scenes/{SCENE_DIR_FMT.format(index)}"}
    try:
        scene = build_scene(rng, cfg.scene)
        save_scene(scene, _scene_dir(cfg.data_root, index))
        entry.update(status="ok", bin=scene.bin,
                     occlusion_x=scene.occlusion_x,
                     n_contacts=len(scene.contacts))
    except (GenerationError, OSError, ValueError) as err:
        entry.update(status="error", error=str(err))
    return entry


def cmd_gen_data(cfg: RunConfig) -> int:
    Path(cfg.data_root).mkdir(parents=True, exist_ok=True)
    indices = list(range(cfg.n_scenes))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            entries = list(pool.map(_gen_one, [cfg] * len(indices), indices))
    else:
        entries = [_gen_one(cfg, i) for i in indices]
    entries.sort(key=lambda e: e["index"])
    _write_manifest(cfg.data_root, entries, cfg)
    failed = [e for e in entries if e["status"] != "ok"]
    for e in failed:
        print(f"scene {e['index']}: {e['error']}", file=sys.stderr)
    print(f"gen-data: {len(entries) - len(failed)}/{len(entries)} scenes "
          f"written to {cfg.data_root}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# fit-codec

def cmd_fit_codec(cfg: RunConfig) -> int:
    manifest = _read_manifest(cfg.data_root)
    indices = _ok_indices(manifest)
    if not indices:
        print("fit-codec: no usable scenes in manifest", file=sys.stderr)
        return 1
    grids = []
    for i in indices:
        scene = load_scene(_scene_dir(cfg.data_root, i))
        # both fields must encode well: reconstruction decodes objects,
        # conditioning encodes hands
        grids.append(scene.object_sdf)
        grids.append(scene.hand_sdf)
    codec = fit_codec(grids, k=cfg.codec_k)
    path = Path(cfg.data_root) / "codec.codc"
    save_codec(codec, path)
    print(f"fit-codec: k={codec.k} fitted on {len(grids)} grids -> {path}")
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(cfg: RunConfig) -> int:
    manifest = _read_manifest(cfg.data_root)
    indices = _ok_indices(manifest)
    if not indices:
        print("train: no usable scenes in manifest", file=sys.stderr)
        return 1
    codec = load_codec(Path(cfg.data_root) / "codec.codc")
    scenes = [load_scene(_scene_dir(cfg.data_root, i)) for i in indices]
    lib = library_from_grids(codec, [s.object_sdf for s in scenes],
                             sigma_min=cfg.sampler.sigma_min)
    conds = np.stack([encode(codec, s.hand_sdf) for s in scenes])
    fts = None
    if cfg.flow.finetune_steps > 0:
        fts = [FinetuneScene(x0=lib.latents[j], hand=s.hand_sdf,
                             touch=s.touch, cond=conds[j])
               for j, s in enumerate(scenes)]
    log_path = Path(cfg.data_root) / "train_log.jsonl"
    den, records = train_denoiser(
        lib, codec, cfg.flow, scenes=fts, conds=conds,
        rng=np.random.default_rng(cfg.seed), log_path=log_path)
    path = Path(cfg.data_root) / "denoiser.tdnz"
    save_denoiser(den, path)
    final = records[-1]
    print(f"train: {len(records)} logged steps, final losses "
          f"fm={final['fm']:.4e} ni={final['ni']:.4e} c={final['c']:.4e} "
          f"-> {path}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct

def _noisy_touch(scene, cfg: RunConfig, index: int):
    """Contact set and tensor after sensor noise, seeded per scene."""
    if cfg.touch_noise_mm <= 0.0 or not scene.contacts:
        return scene.contacts, scene.touch
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, 77, index)))
    contacts = perturb_contacts(scene.contacts, cfg.touch_noise_mm,
                                scene.frame, rng)
    return contacts, build_touch_tensor(contacts, scene.object_sdf.resolution)


def _recon_one(cfg: RunConfig, index: int, recon_root: Path,
               mode: str) -> Tuple[dict, Optional[float]]:
    """Reconstruct scene `index`; returns (manifest entry, voxel IoU)."""
    entry = {"index": index, "mode": mode}
    try:
        scene = load_scene(_scene_dir(cfg.data_root, index))
        codec = load_codec(Path(cfg.data_root) / "codec.codc")
        _, touch = _noisy_touch(scene, cfg, index)
        contact_grid = touch.C

        den_path = Path(cfg.data_root) / "denoiser.tdnz"
        if den_path.exists():
            den = load_denoiser(den_path)
            field = lambda x, t, cond: den.forward(x, t, cond)  # noqa: E731
            hand_z = encode(codec, scene.hand_sdf)
            cond = np.zeros_like(hand_z) if mode == "vision-only" else hand_z
        else:
            # no trained network: retrieval prior over the dataset,
            # reweighted by per-scene evidence
            manifest = _read_manifest(cfg.data_root)
            grids = [load_scene(_scene_dir(cfg.data_root, j)).object_sdf
                     for j in _ok_indices(manifest)]
            lib = library_from_grids(codec, grids,
                                     sigma_min=cfg.sampler.sigma_min)
            # evidence compares re-renders at grid resolution, so the
            # reference must come through the same pipeline
            _, vis_gt, _ = render_masks(scene.object_sdf, scene.hand_sdf,
                                        scene.object_sdf.resolution)
            fn = evidence_fn(codec, scene, vis_gt, mode,
                             cfg.sampler.tau, DEFAULT_STRENGTHS,
                             contact_grid if mode == "full" else None)
            clib = condition_library(lib, fn, strength=1.0)
            field = lambda x, t, cond: oracle_velocity(x, t, clib)  # noqa: E731
            cond = None

        scfg = sampler_for_run(cfg)
        scfg = dataclasses.replace(scfg, seed=cfg.seed + index)
        if mode == "no-touch":
            scfg = dataclasses.replace(scfg, lam_c=0.0)
        elif mode == "vision-only":
            scfg = dataclasses.replace(scfg, guidance_enabled=False)
        hand = None if mode == "vision-only" else scene.hand_sdf
        use_touch = touch if (mode == "full" and scfg.guidance_enabled) else None

        x, grid, records = sample(field, cond, codec, hand=hand,
                                  touch=use_touch, cfg=scfg)

        out = Path(recon_root) / SCENE_DIR_FMT.format(index)
        out.mkdir(parents=True, exist_ok=True)
        save_sdfg(grid, out / "recon.sdfg")
        save_trajectory(records, out / "trajectory.jsonl")
        try:
            save_ply(extract_surface(grid), out / "recon.ply")
        except ValueError as err:
            entry["mesh_error"] = str(err)
        entry.update(status="ok", latent=[float(v) for v in x],
                     final_energy=records[-1]["E"])
        return entry, voxel_iou(grid, scene.object_sdf)
    except (FileNotFoundError, ValueError, OSError) as err:
        entry.update(status="error", error=str(err))
        return entry, None


def _reconstruct_all(cfg: RunConfig, recon_root: Path, mode: str
                     ) -> Tuple[List[dict], List[Optional[float]]]:
    manifest = _read_manifest(cfg.data_root)
    indices = _ok_indices(manifest)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_recon_one, [cfg] * len(indices), indices,
                                    [recon_root] * len(indices),
                                    [mode] * len(indices)))
    else:
        results = [_recon_one(cfg, i, recon_root, mode) for i in indices]
    entries = [r[0] for r in results]
    ious = [r[1] for r in results]
    return entries, ious


def cmd_reconstruct(cfg: RunConfig) -> int:
    recon_root = _out_dir(cfg) / "recon"
    entries, ious = _reconstruct_all(cfg, recon_root, cfg.ablation)
    failed = [e for e in entries if e["status"] != "ok"]
    for e in failed:
        print(f"scene {e['index']}: {e['error']}", file=sys.stderr)
    recon_root.mkdir(parents=True, exist_ok=True)
    with open(recon_root / "recon_log.json", "w") as fh:
        json.dump({"mode": cfg.ablation, "guidance": cfg.guidance,
                   "touch_noise_mm": cfg.touch_noise_mm,
                   "scenes": entries}, fh, indent=2)
    good = [v for v in ious if v is not None]
    mean_iou = float(np.mean(good)) if good else float("nan")
    print(f"reconstruct[{cfg.ablation}]: {len(entries) - len(failed)}"
          f"/{len(entries)} scenes, mean voxel IoU {mean_iou:.4f} "
          f"-> {recon_root}")
    return 1 if failed or not entries else 0


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(cfg: RunConfig) -> int:
    from .plots import save_report_figures

    manifest = _read_manifest(cfg.data_root)
    recon_root = _out_dir(cfg) / "recon"
    rows = []
    missing = 0
    for i in _ok_indices(manifest):
        pred_path = recon_root / SCENE_DIR_FMT.format(i) / "recon.sdfg"
        if not pred_path.exists():
            print(f"evaluate: no reconstruction for scene {i}, skipping",
                  file=sys.stderr)
            missing += 1
            continue
        scene = load_scene(_scene_dir(cfg.data_root, i))
        s = EvalSample(pred=load_sdfg(pred_path), gt=scene.object_sdf,
                       bin=scene.bin)
        rows.append(evaluate_sample(s, seed=cfg.seed + i))
    if not rows:
        print("evaluate: nothing to score", file=sys.stderr)
        return 1
    report = stratified_report(rows, K=cfg.scene.bins)

    out = _out_dir(cfg) / "report"
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")

    metrics = sorted(report.metrics)
    labels = report.bin_labels() + ["All"]
    plot_rows = [{"bin": lab, **{m: report.metrics[m][lab] for m in metrics}}
                 for lab in labels]
    save_report_figures(plot_rows, metrics, out)
    print(f"evaluate: {len(rows)} scenes scored ({missing} missing), "
          f"report and figures -> {out}")
    return 0


# ---------------------------------------------------------------------------
# ablate

def cmd_ablate(cfg: RunConfig) -> int:
    from .plots import ablation_bars

    base = _out_dir(cfg) / "ablation"
    runs: List[Tuple[str, RunConfig]] = [
        (m, dataclasses.replace(cfg, ablation=m, touch_noise_mm=0.0))
        for m in COND_MODES]
    if cfg.touch_noise_mm > 0.0:
        runs.append((f"full+{cfg.touch_noise_mm:g}mm",
                     dataclasses.replace(cfg, ablation="full")))

    results = {}
    records = []
    any_failed = False
    for name, run_cfg in runs:
        entries, ious = _reconstruct_all(run_cfg, base / name / "recon",
                                         run_cfg.ablation)
        good = [v for v in ious if v is not None]
        any_failed |= any(e["status"] != "ok" for e in entries)
        mean_iou = float(np.mean(good)) if good else float("nan")
        results[name] = mean_iou
        records.append({"mode": name, "mean_viou": mean_iou, "n": len(good)})
        print(f"ablate[{name}]: mean voxel IoU {mean_iou:.4f} "
              f"over {len(good)} scenes")

    base.mkdir(parents=True, exist_ok=True)
    with open(base / "ablation.csv", "w") as fh:
        fh.write("mode,mean_viou,n\n")
        for r in records:
            fh.write(f"{r['mode']},{r['mean_viou']!r},{r['n']}\n")
    with open(base / "ablation.json", "w") as fh:
        json.dump({"seed": cfg.seed, "runs": records}, fh, indent=2)
    ablation_bars(results, base / "fig_ablation.png")
    print(f"ablate: table and figure -> {base}")
    return 1 if any_failed else 0


# ---------------------------------------------------------------------------
# selftest

def cmd_selftest(cfg: RunConfig) -> int:
    from .suites import format_selftest, selftest

    rows = selftest()
    print(format_selftest(rows))
    return 0 if all(ok for _, ok, _, _ in rows) else 1


# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-codec": cmd_fit_codec,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](cfg)
    except (FileNotFoundError, ValueError) as err:
        print(str(err), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
