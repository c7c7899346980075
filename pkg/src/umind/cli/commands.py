"""Subcommand implementations. Each takes the resolved config and parsed flags."""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import tensorfile
from ..alignment.gradcheck import check_all
from ..alignment.training import (
    compute_targets,
    load_train_state,
    new_train_state,
    save_train_state,
    split_validation,
    train,
)
from ..bridge.bundle import export_conditions, load_bridge_model, save_bridge_model, write_bundles
from ..bridge.prior import train_prior
from ..bridge.qformer import init_qformer, train_qformer
from ..data.io import load_channel_groups, load_trialset, save_trialset
from ..data.preprocess import preprocess
from ..data.synthetic import generate_synthetic
from ..data.types import TrialSet, group_by
from ..encoders import embed_trials, load_checkpoint, model_fingerprint, save_checkpoint
from ..errors import ConfigError, NumericalAbort, ProtocolError
from ..metrics import (
    compute_report,
    get_extractor,
    list_images,
    load_image,
    ranked_reports,
    write_metric_table,
    write_pair_dump,
)
from ..providers import fused_prompt, load_image_provider, load_prompt_provider, load_text_provider, save_table
from ..zeroshot import AblationContext, build_templates, evaluate, spatial_ablation, temporal_ablation
from ..zeroshot.reports import write_ablation_table, write_plot_data, write_rank_dump, write_topk_table
from .config import ExperimentConfig
from .manifest import RunManifest, sha256_tree

log = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
METHOD_NAME = "umind"


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- data


@dataclass
class Loaded:
    train: TrialSet          # preprocessed, before the validation hold-out
    test: TrialSet
    image_provider: object
    text_provider: object
    embed_dim: int
    compat: dict             # what a checkpoint must agree with


def load_data(cfg: ExperimentConfig, manifest: RunManifest | None = None) -> Loaded:
    root = cfg.dataset_path
    train_raw = load_trialset(root / "train", "train")
    test_raw = load_trialset(root / "test", "test", against=train_raw)
    img_path = cfg.dataset_file("image_embeddings", "image_embeddings.umt")
    txt_path = cfg.dataset_file("text_embeddings", "text_embeddings.umt")
    img, txt = load_image_provider(img_path), load_text_provider(txt_path)
    if manifest is not None:
        for name, p in (("train", root / "train"), ("test", root / "test"),
                        ("image_embeddings", img_path), ("text_embeddings", txt_path)):
            manifest.add_input(name, p)
    pcfg = cfg.preprocess()
    if pcfg is not None:
        train_ts, test_ts, _ = preprocess(train_raw, test_raw, pcfg)
    else:
        train_ts, test_ts = train_raw, test_raw
    d_img = img.embed_images(train_ts.catalog[:1]).shape[1]
    d_txt = txt.embed_texts([train_ts.catalog[0].coarse_text]).shape[1]
    if d_img != d_txt:
        raise ConfigError(f"image embeddings have width {d_img} but text embeddings {d_txt}")
    compat = {
        "train_data": sha256_tree(root / "train"),
        "image_provider": img.fingerprint(),
        "text_provider": txt.fingerprint(),
        "preprocess": json.dumps(cfg.raw["preprocess"], sort_keys=True),
    }
    return Loaded(train_ts, test_ts, img, txt, d_img, compat)


def _split(cfg: ExperimentConfig, data: Loaded):
    return split_validation(data.train, cfg.alignment().val_size, cfg.seed)


def _encoder_cfg(cfg: ExperimentConfig, data: Loaded):
    c, t = data.train.shape
    return cfg.encoder(c, t, data.embed_dim)


def _check_compat(meta: dict, data: Loaded, path: Path) -> None:
    recorded = meta.get("compat")
    if recorded is None:
        raise ConfigError(f"{path}: checkpoint carries no data/provider fingerprint; refusing to use it")
    bad = sorted(k for k in data.compat if recorded.get(k) != data.compat[k])
    if bad:
        raise ConfigError(f"{path}: checkpoint was trained against different {', '.join(bad)}; refusing to use it")


def _checkpoint_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "checkpoints"


def _reports_dir(cfg: ExperimentConfig) -> Path:
    d = cfg.out / "reports"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_model(cfg: ExperimentConfig, data: Loaded, checkpoint: str | None, manifest: RunManifest):
    path = Path(checkpoint) if checkpoint else _checkpoint_dir(cfg) / "best.umt"
    model, _, meta = load_checkpoint(path)
    _check_compat(meta, data, path)
    if model_fingerprint(model) != meta.get("fingerprint"):
        raise ConfigError(f"{path}: weights do not match the recorded fingerprint")
    manifest.add_input("checkpoint", path)
    manifest.fingerprints["alignment"] = meta["fingerprint"]
    return model


# ---------------------------------------------------------------- synth


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    spec = cfg.synthetic()
    root = cfg.dataset_path
    if root.exists() and not args.force:
        raise ConfigError(f"{root} already exists; pass --force to overwrite")
    if args.dry_run:
        _say(f"dry run: would write a synthetic dataset to {root}")
        return 0
    if root.exists():
        shutil.rmtree(root)
    manifest = RunManifest("synth", cfg.echo())
    t0 = time.perf_counter()
    train_ts, test_ts, oracle = generate_synthetic(spec)
    save_trialset(train_ts, root / "train")
    save_trialset(test_ts, root / "test")
    catalog = train_ts.catalog + test_ts.catalog
    img, txt, prompt = oracle.providers(catalog)
    save_table(root / "image_embeddings.umt", [r.image_ref for r in catalog], img.embed_images(catalog), "image_refs")
    texts = sorted({t for r in catalog for t in (r.coarse_text, r.fine_text)})
    save_table(root / "text_embeddings.umt", texts, txt.embed_texts(texts), "texts")
    prompts = [fused_prompt(r) for r in catalog]
    seq, pooled = prompt.encode_prompts(prompts)
    tensorfile.save(root / "prompt_embeddings.umt",
                    {"sequence": seq.astype(np.float32), "pooled": pooled.astype(np.float32)}, {"texts": prompts})
    manifest.time("generate", t0)
    for name in ("train", "test", "image_embeddings.umt", "text_embeddings.umt", "prompt_embeddings.umt"):
        manifest.add_output(root / name)
    manifest.write(cfg.out)
    _say(f"synthetic dataset written to {root}")
    _say(f"  train: {len(train_ts.trials)} trials, {spec.n_categories} categories x "
         f"{spec.images_per_category} images x {spec.repetitions} repetitions")
    _say(f"  test:  {len(test_ts.trials)} trials, {spec.n_test_categories} categories x 1 image x "
         f"{spec.test_repetitions} repetitions")
    _say(f"  trial shape: {spec.channels} channels x {spec.samples} samples @ {spec.sample_rate_hz:g} Hz; "
         f"embedding width {spec.embed_dim}")
    return 0


# ---------------------------------------------------------------- train


class _Interrupted(Exception):
    pass


def cmd_train(cfg: ExperimentConfig, args) -> int:
    align = cfg.alignment()
    if args.dry_run:
        _say(json.dumps(cfg.echo(), indent=2, sort_keys=True))
        _say("dry run: configuration is valid; no training performed")
        return 0
    manifest = RunManifest("train", cfg.echo())
    t0 = time.perf_counter()
    data = load_data(cfg, manifest)
    train_part, val_part = _split(cfg, data)
    enc_cfg = _encoder_cfg(cfg, data)
    manifest.time("load", t0)

    ckdir = _checkpoint_dir(cfg)
    last, best = ckdir / "last.umt", ckdir / "best.umt"
    log_path = cfg.out / "train_log.jsonl"
    if args.resume and last.exists():
        _, _, meta = load_checkpoint(last)
        _check_compat(meta, data, last)
        state = load_train_state(last)
        if asdict(state.cfg) != asdict(align) or asdict(state.model.cfg) != asdict(enc_cfg):
            raise ConfigError(f"{last} was written with a different model/training configuration")
        _say(f"resuming from epoch {state.epoch}")
    else:
        if last.exists() and not args.force:
            raise ConfigError(f"{last} exists; pass --resume to continue or --force to restart")
        state = new_train_state(enc_cfg, align)
    ckdir.mkdir(parents=True, exist_ok=True)
    # Rewrite the loss log from the restored history so a resumed log matches an uninterrupted one.
    with open(log_path, "w", encoding="utf-8") as fh:
        for rec in state.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def on_epoch_end(s):
        save_train_state(last, s, {"compat": data.compat})
        if args.stop_after is not None and s.epoch >= args.stop_after and s.epoch < align.epochs:
            raise _Interrupted

    t1 = time.perf_counter()
    try:
        state = train(state, train_part, val_part, data.image_provider, data.text_provider, align,
                      log_path=log_path, on_epoch_end=on_epoch_end)
    except _Interrupted:
        _say(f"stopped after epoch {state.epoch} as requested; resume with --resume")
        return 0
    manifest.time("train", t1)
    fp = save_checkpoint(best, state.best_model(), meta={
        "compat": data.compat, "best_epoch": state.best_epoch,
        "best_validation_top1": state.best_validation_metric,
    })
    manifest.fingerprints["alignment"] = fp
    for p in (best, last, log_path):
        manifest.add_output(p)
    manifest.extra["best_epoch"] = state.best_epoch
    manifest.extra["best_validation_top1"] = state.best_validation_metric
    manifest.write(cfg.out)
    _say(f"trained {align.epochs} epochs; best validation top-1 {100 * state.best_validation_metric:.2f}% "
         f"at epoch {state.best_epoch}")
    _say(f"checkpoint: {best}")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    if args.dry_run:
        _say("dry run: configuration is valid")
        return 0
    manifest = RunManifest("eval", cfg.echo())
    data = load_data(cfg, manifest)
    model = _load_model(cfg, data, args.checkpoint, manifest)
    bank = build_templates(data.test.catalog, data.image_provider, data.text_provider,
                           cfg.raw["eval"]["one_image_per_category"])
    rdir = _reports_dir(cfg)
    ret_rows, cls_rows = {}, {}
    ranks_path = rdir / "ranks.jsonl"
    ranks_path.write_text("", encoding="utf-8")
    for subject, trials in sorted(group_by(data.test.trials, lambda t: t.subject_id).items()):
        ret, cls, ret_res, cls_res = evaluate(model, data.test.with_trials(trials), bank)
        ret_rows[subject], cls_rows[subject] = ret, cls
        write_rank_dump(ranks_path, ret_res, [t.image_id for t in trials], "retrieval", subject, append=True)
        write_rank_dump(ranks_path, cls_res, [t.category_id for t in trials], "classification", subject, append=True)
        _say(f"{subject}: retrieval top-1 {100 * ret.top1:.1f}% top-5 {100 * ret.top5:.1f}% | "
             f"classification top-1 {100 * cls.top1:.1f}% top-5 {100 * cls.top5:.1f}%")
    write_topk_table(rdir / "retrieval.tsv", {METHOD_NAME: ret_rows})
    write_topk_table(rdir / "classification.tsv", {METHOD_NAME: cls_rows})
    n = len(ret_rows)
    _say(f"average: retrieval top-1 {100 * sum(r.top1 for r in ret_rows.values()) / n:.1f}% | "
         f"classification top-1 {100 * sum(r.top1 for r in cls_rows.values()) / n:.1f}%")
    for p in ("retrieval.tsv", "classification.tsv", "ranks.jsonl"):
        manifest.add_output(rdir / p)
    manifest.fingerprints["templates"] = bank.fingerprint
    manifest.write(cfg.out)
    return 0


# ---------------------------------------------------------------- ablate


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    ab = cfg.raw["ablation"]
    modes = [args.mode] if args.mode else list(ab["modes"])
    if args.dry_run:
        _say(f"dry run: would run ablation modes {modes}")
        return 0
    manifest = RunManifest("ablate", cfg.echo())
    data = load_data(cfg, manifest)
    train_part, val_part = _split(cfg, data)
    model = None if ab["retrain"] else _load_model(cfg, data, args.checkpoint, manifest)
    bank = build_templates(data.test.catalog, data.image_provider, data.text_provider,
                           cfg.raw["eval"]["one_image_per_category"])
    ctx = AblationContext(train_part, val_part, data.test, bank, data.image_provider, data.text_provider,
                          _encoder_cfg(cfg, data), cfg.alignment(), model)
    rdir = _reports_dir(cfg)
    for mode in modes:
        t0 = time.perf_counter()
        if mode == "spatial":
            cmap = load_channel_groups(ab["channel_groups"])
            grid = spatial_ablation(ctx, ab["regions"], cmap, ab["retrain"])
        else:
            grid = temporal_ablation(ctx, mode, ab["step_ms"], ab["width_ms"], ab["retrain"])
        manifest.time(mode, t0)
        table, plot = rdir / f"ablation_{mode}.tsv", rdir / f"ablation_{mode}_plot.tsv"
        write_ablation_table(table, grid)
        write_plot_data(plot, grid)
        manifest.add_output(table)
        manifest.add_output(plot)
        for c in grid.cells:
            if c.retrieval is None:
                _say(f"{mode} {c.label}: {c.warning}")
            else:
                _say(f"{mode} {c.label}: retrieval top-1 {100 * c.retrieval.top1:.1f}% | "
                     f"classification top-1 {100 * c.classification.top1:.1f}%")
    manifest.write(cfg.out)
    return 0


# ---------------------------------------------------------------- export


def cmd_export(cfg: ExperimentConfig, args) -> int:
    if args.dry_run:
        _say("dry run: configuration is valid")
        return 0
    manifest = RunManifest("export", cfg.echo())
    data = load_data(cfg, manifest)
    prompt_path = cfg.dataset_file("prompt_embeddings", "prompt_embeddings.umt")
    prompt_provider = load_prompt_provider(prompt_path)
    manifest.add_input("prompt_embeddings", prompt_path)
    model = _load_model(cfg, data, args.checkpoint, manifest)
    ckdir = _checkpoint_dir(cfg)
    prior_path, qf_path = ckdir / "prior.umt", ckdir / "qformer.umt"

    zv_hat, zs_hat = embed_trials(model, data.train.trials)
    fit = cfg.bridge_fit()
    t0 = time.perf_counter()
    if prior_path.exists() and not args.force:
        prior = load_bridge_model(prior_path)
    else:
        targets = compute_targets(data.train.catalog, data.image_provider, data.text_provider)
        zv = np.stack([targets.image[t.image_id] for t in data.train.trials])
        prior, _ = train_prior(cfg.prior(zv_hat.shape[1], zv.shape[1]), zv_hat, zv, fit)
        save_bridge_model(prior_path, prior)
    if qf_path.exists() and not args.force:
        qformer = load_bridge_model(qf_path)
    else:
        by_id = {r.image_id: r for r in data.train.catalog}
        seq, pooled = prompt_provider.encode_prompts([fused_prompt(by_id[t.image_id]) for t in data.train.trials])
        qformer = init_qformer(cfg.qformer(zs_hat.shape[1], seq.shape[2], pooled.shape[1]))
        if cfg.raw["qformer"]["n_queries"] != seq.shape[1]:
            raise ConfigError(f"qformer.n_queries={cfg.raw['qformer']['n_queries']} but prompt targets have "
                              f"{seq.shape[1]} tokens")
        qformer, _ = train_qformer(qformer, zs_hat, seq, pooled, fit)
        save_bridge_model(qf_path, qformer)
    manifest.time("bridge", t0)

    bundles, fps = export_conditions(data.test.trials, model, prior, qformer, prior_seed=cfg.seed)
    out = _reports_dir(cfg) / "conditions.umb"
    write_bundles(out, bundles, fps)
    manifest.fingerprints.update(fps)
    for p in (prior_path, qf_path, out):
        manifest.add_output(p)
    manifest.write(cfg.out)
    _say(f"wrote {len(bundles)} condition bundles to {out}")
    return 0


# ---------------------------------------------------------------- metrics


def _metric_inputs(gen_dir: Path, ref_dir: Path):
    refs = list_images(ref_dir)
    gen_files = list_images(gen_dir)
    gen_dirs = {p.name: p for p in sorted(gen_dir.iterdir()) if p.is_dir()} if gen_dir.is_dir() else {}
    gen_keys = set(gen_files) | set(gen_dirs)
    missing, extra = sorted(set(refs) - gen_keys), sorted(gen_keys - set(refs))
    if missing or extra:
        raise ProtocolError(f"generated and reference sets are misaligned: missing generated {missing}, "
                            f"no reference for {extra}")
    return refs, gen_files, gen_dirs


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    m = cfg.raw["metrics"]
    gen_dir = Path(args.generated or m["generated"] or "")
    ref_dir = Path(args.reference or m["reference"] or "")
    if not (args.generated or m["generated"]) or not (args.reference or m["reference"]):
        raise ConfigError("metrics needs generated and reference image directories")
    names = args.extractor or m["extractors"]
    extractors = [get_extractor(n) for n in names]
    if args.dry_run:
        _say("dry run: configuration is valid")
        return 0
    manifest = RunManifest("metrics", cfg.echo())
    manifest.add_input("generated", gen_dir)
    manifest.add_input("reference", ref_dir)
    refs, gen_files, gen_dirs = _metric_inputs(gen_dir, ref_dir)
    stems = sorted(refs)
    ref_imgs = [load_image(refs[s]) for s in stems]
    rdir = _reports_dir(cfg)
    if gen_dirs:
        if gen_files:
            raise ProtocolError("mix of single generated images and candidate directories")
        cands = []
        for s, r in zip(stems, ref_imgs):
            files = list_images(gen_dirs[s])
            cands.append([load_image(files[k], r.shape[:2]) for k in sorted(files)])
        rank_by = get_extractor(m["rank_by"])
        per_rank = ranked_reports(cands, ref_imgs, extractors, rank_by, m["n_candidates"], stems)
        rows = {METHOD_NAME: per_rank[0]}
        rows.update({f"{METHOD_NAME} rank-{k + 1}": rep for k, rep in enumerate(per_rank)})
        best = per_rank[0]
    else:
        gen_imgs = [load_image(gen_files[s], r.shape[:2]) for s, r in zip(stems, ref_imgs)]
        best = compute_report(gen_imgs, ref_imgs, extractors, stems)
        rows = {METHOD_NAME: best}
    write_metric_table(rdir / "metrics.tsv", rows)
    write_pair_dump(rdir / "metrics_pairs.jsonl", best, METHOD_NAME)
    manifest.add_output(rdir / "metrics.tsv")
    manifest.add_output(rdir / "metrics_pairs.jsonl")
    manifest.fingerprints.update({e.name: e.fingerprint for e in extractors})
    manifest.write(cfg.out)
    _say(f"{best.n_pairs} pairs: PixCorr {best.pixcorr:.4f}, SSIM {best.ssim:.4f}")
    for e in extractors:
        tw = best.two_way.get(e.name)
        _say(f"  {e.name}: two-way {'n/a' if tw is None else f'{tw:.4f}'}, distance {best.distance[e.name]:.4f}")
    return 0


# ---------------------------------------------------------------- check-grads


def cmd_check_grads(cfg: ExperimentConfig, args) -> int:
    if args.dry_run:
        _say("dry run: configuration is valid")
        return 0
    manifest = RunManifest("check-grads", cfg.echo())
    t0 = time.perf_counter()
    reports = check_all(cfg.seed)
    manifest.time("check", t0)
    worst = max(r.max_rel_error for r in reports.values())
    for name, r in reports.items():
        _say(f"{name}: max relative error {r.max_rel_error:.3e} over {r.n_checked} entries")
    out = _reports_dir(cfg) / "gradcheck.json"
    doc = {name: {"max_rel_error": r.max_rel_error, "n_checked": r.n_checked, "per_tensor": r.per_tensor}
           for name, r in reports.items()}
    tensorfile.atomic_write_bytes(out, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    manifest.add_output(out)
    manifest.extra["max_rel_error"] = worst
    manifest.write(cfg.out)
    if worst >= GRAD_TOLERANCE:
        raise NumericalAbort(f"gradient check failed: max relative error {worst:.3e} >= {GRAD_TOLERANCE:g}")
    _say(f"gradient check passed (max relative error {worst:.3e} < {GRAD_TOLERANCE:g})")
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
    "export": cmd_export, "metrics": cmd_metrics, "check-grads": cmd_check_grads,
}
