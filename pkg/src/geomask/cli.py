"""Command-line entry point: ``geomask <command> ...`` or ``python -m geomask``.

Exit status: 0 on success, 2 for usage/config errors (the offending key path
is printed), 1 for runtime failures. Every command that writes artifacts
also writes ``resolved_config.json`` (config, seed, config hash) next to
them; a failed command leaves an ``INCOMPLETE`` marker in its output
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig, load_config, write_resolved
from .errors import ConfigError, InvalidArgumentError, MissingInputError

log = logging.getLogger("geomask")

OUTPUT_ROOT_ENV = "GEOMASK_OUTPUT_ROOT"
COMMANDS = (
    "synth-data", "build-vocab", "encode-text", "encode-geo", "train-tokenizer", "tokenize", "detokenize",
    "pretrain", "generate", "tim-finetune", "evaluate", "report",
)
EVAL_TASKS = ("recon", "gen", "fewshot", "geoloc", "seg")


class UsageError(Exception):
    pass


def _csv(text: Optional[str]) -> List[str]:
    return [t for t in (text or "").split(",") if t]


def _event(**fields):
    log.info(json.dumps(fields, sort_keys=True, default=str))


def write_tsv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.6f}"
        return str(v)

    lines = ["\t".join(header)] + ["\t".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tsv(path) -> List[Dict[str, str]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geomask", description="Multimodal masked token modeling on synthetic rasters.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        return sp

    def common(sp, out_help="output directory (default: $%s/<command>-<config hash>)" % OUTPUT_ROOT_ENV):
        sp.add_argument("--config", help="JSON run config; unknown keys are rejected")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("--out", help=out_help)

    sp = add("synth-data", "generate a synthetic aligned-modality dataset")
    common(sp)
    sp.add_argument("--n-samples", type=int, help="number of samples (default: data.n_samples)")
    sp.add_argument("--size", type=int, help="tile side in pixels, multiple of 16 (default: data.size)")
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--start", type=int, default=0, help="index of the first sample")

    sp = add("build-vocab", "build the caption/geolocation vocabulary from a dataset")
    common(sp, "vocabulary file to write")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--max-subwords", type=int, help="cap on word + piece entries")

    sp = add("encode-text", "print the token ids of a text")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--text", required=True)

    sp = add("encode-geo", "print the [lat, lon] token ids of a coordinate")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--lat", type=float, required=True)
    sp.add_argument("--lon", type=float, required=True)

    sp = add("train-tokenizer", "train image tokenizers")
    common(sp)
    sp.add_argument("--modality", default="all", help="image modality name or 'all'")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--max-samples", type=int, help="train on at most this many samples")

    sp = add("tokenize", "tokenize a dataset into a training corpus")
    common(sp)
    sp.add_argument("--model", required=True, help="tokenizer checkpoint or directory of them")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--vocab", help="text vocabulary (adds caption and geolocation sequences)")

    sp = add("detokenize", "decode a token grid back to a raster")
    common(sp, "output .npy file")
    sp.add_argument("--model", required=True, help="tokenizer checkpoint")
    sp.add_argument("--grid", required=True, help="token grid as .npy or JSON list of lists")
    sp.add_argument("--steps", type=int, default=10, help="diffusion steps")

    sp = add("pretrain", "pretrain the backbone on a tokenized corpus")
    common(sp)
    sp.add_argument("--data", required=True, help="corpus .npz written by 'tokenize'")
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = add("generate", "generate target modalities for dataset samples")
    common(sp)
    sp.add_argument("--model", required=True, help="backbone checkpoint")
    sp.add_argument("--tokenizers", required=True, help="tokenizer directory")
    sp.add_argument("--vocab", help="text vocabulary")
    sp.add_argument("--data", required=True, help="dataset directory supplying the inputs")
    sp.add_argument("--inputs", help="comma-separated input modalities")
    sp.add_argument("--targets", help="comma-separated target modalities, in chain order")
    chain = sp.add_mutually_exclusive_group()
    chain.add_argument("--chain", dest="chain", action="store_true", default=None, help="chain the targets")
    chain.add_argument("--no-chain", dest="chain", action="store_false", help="generate targets independently")
    sp.add_argument("--temperature", type=float)
    sp.add_argument("--decode-steps", type=int)
    sp.add_argument("--diffusion-steps", type=int)
    sp.add_argument("--n-samples", type=int)

    sp = add("tim-finetune", "segmentation fine-tuning with and without generated intermediate modalities")
    common(sp)
    sp.add_argument("--model", required=True, help="backbone checkpoint")
    sp.add_argument("--tokenizers", help="tokenizer directory (for token-level inputs)")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--tim-modalities", help="comma-separated modalities to generate")
    sp.add_argument("--k", type=int, help="recursion depth")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--task", choices=("water", "lulc"))
    sp.add_argument("--inputs", help="comma-separated observed modalities")

    sp = add("evaluate", "run an evaluation protocol")
    common(sp)
    sp.add_argument("--task", required=True, choices=EVAL_TASKS)
    sp.add_argument("--model", help="backbone checkpoint")
    sp.add_argument("--tokenizers", help="tokenizer directory")
    sp.add_argument("--vocab", help="text vocabulary")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--no-figures", action="store_true")

    sp = add("report", "aggregate run directories into summary tables and figures")
    sp.add_argument("--runs", nargs="+", required=True, help="run directories")
    sp.add_argument("--out", required=True, help="report directory")
    return p


# -- helpers ------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir) / args.command
    root = os.environ.get(OUTPUT_ROOT_ENV, "geomask-runs")
    return Path(root) / f"{args.command}-{cfg.hash()}"


def _require(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {p}")
    return p


def _load_samples(path):
    from .dataset import load_samples

    p = _require(path, "data")
    return load_samples(p)


def _load_vocab(path):
    from .text import TextVocab

    return TextVocab.load(_require(path, "vocab")) if path else None


# -- commands -----------------------------------------------------------------


def cmd_synth_data(args, cfg: RunConfig, out: Path):
    from .dataset import write_dataset
    from .synth import generate_samples

    n = args.n_samples if args.n_samples is not None else cfg.data.n_samples
    size = args.size if args.size is not None else cfg.data.size
    if n < 1:
        raise InvalidArgumentError("--n-samples must be >= 1")
    seed = cfg.module_seed("data", args.split)
    samples = generate_samples(n, seed=seed, size=(size, size), start=args.start,
                               cloud_probability=cfg.data.cloud_probability)
    write_dataset(samples, out, split=args.split, rng_seed=seed, extra={"size": size})
    _event(event="wrote", what="dataset", n=n, path=str(out))


def cmd_build_vocab(args, cfg: RunConfig, out: Path):
    from .text import build_vocab

    samples = _load_samples(args.data)
    vocab = build_vocab([s.caption for s in samples], args.max_subwords)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _event(event="wrote", what="vocab", size=len(vocab), path=str(out))


def cmd_encode_text(args):
    from .text import TextVocab, encode_text

    print(json.dumps(encode_text(TextVocab.load(_require(args.vocab, "vocab")), args.text)))


def cmd_encode_geo(args):
    from .text import TextVocab, encode_geolocation

    print(json.dumps(encode_geolocation(TextVocab.load(_require(args.vocab, "vocab")), args.lat, args.lon)))


def cmd_train_tokenizer(args, cfg: RunConfig, out: Path):
    from .pipeline import save_tokenizers, train_tokenizers
    from .synth import IMAGE_MODALITIES

    samples = _load_samples(args.data)
    if args.max_samples:
        samples = samples[: args.max_samples]
    mods = list(IMAGE_MODALITIES) if args.modality == "all" else _csv(args.modality)
    toks = train_tokenizers(samples, cfg, mods)
    save_tokenizers(toks, out)
    hist = {m: t.history for m, t in toks.items()}
    (out / "tokenizer_history.json").write_text(json.dumps(hist, indent=1, sort_keys=True))
    _event(event="wrote", what="tokenizers", modalities=mods, path=str(out))


def cmd_tokenize(args, cfg: RunConfig, out: Path):
    from .pipeline import load_tokenizers
    from .pretrain import build_corpus

    toks = load_tokenizers(_require(args.model, "model"))
    samples = _load_samples(args.data)
    vocab = _load_vocab(args.vocab)
    corpus = build_corpus(samples, toks, vocab, caption_max_len=cfg.data.caption_max_len)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save(out / "corpus.npz")
    meta = {"vocab_sizes": {m: t.vocab_size for m, t in toks.items()}}
    if vocab is not None:
        meta["vocab_sizes"].update(caption=len(vocab), geolocation=len(vocab))
    (out / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    _event(event="wrote", what="corpus", n=len(corpus), path=str(out / "corpus.npz"))


def _load_grid(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.asarray(json.loads(path.read_text()), dtype=np.int64)


def cmd_detokenize(args, cfg: RunConfig, out: Path):
    from .tokenizer import decode_tokens, load_tokenizer

    tok = load_tokenizer(_require(args.model, "model"))
    grid = _load_grid(_require(args.grid, "grid"))
    raster = decode_tokens(tok, grid, args.steps, cfg.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, raster)
    _event(event="wrote", what="raster", shape=list(raster.shape), path=str(out))


def _corpus_sizes(path: Path) -> Dict[str, int]:
    meta = path.with_name("corpus.json")
    if not meta.exists():
        raise MissingInputError(f"{meta} (written by 'tokenize') is missing")
    return json.loads(meta.read_text())["vocab_sizes"]


def cmd_pretrain(args, cfg: RunConfig, out: Path):
    from .pipeline import backbone_config
    from .pretrain import TokenizedCorpus, load_checkpoint, pretrain

    data = _require(args.data, "data")
    if data.is_dir():
        data = data / "corpus.npz"
    corpus = TokenizedCorpus.load(_require(str(data), "data"))
    sizes = _corpus_sizes(data)
    n_val = max(1, int(round(len(corpus) * cfg.data.val_fraction))) if len(corpus) > 1 else 0
    train = corpus.subset(np.arange(len(corpus) - n_val))
    val = corpus.subset(np.arange(len(corpus) - n_val, len(corpus))) if n_val else None
    pcfg = cfg.pretrain_config()
    resume = load_checkpoint(args.resume, pcfg) if args.resume else None
    state = pretrain(train, val, cfg.masking_config(), backbone_config(cfg, train, sizes), pcfg,
                     resume=resume, checkpoint_dir=out)
    import shutil

    shutil.copyfile(out / "last.pt", out / "backbone.pt")
    (out / "history.json").write_text(json.dumps(state.history, indent=1, sort_keys=True))
    _event(event="wrote", what="backbone", steps=state.step, path=str(out / "backbone.pt"))


def _raster_of(value, tokenizers, request, vocab):
    from .generation import detokenize_outputs

    return detokenize_outputs(tokenizers, value, request, vocab)


def cmd_generate(args, cfg: RunConfig, out: Path):
    from .dataset import write_dataset
    from .generation import GenerationRequest, detokenize_outputs, generate
    from .pipeline import load_tokenizers, sample_inputs
    from .pretrain import load_backbone
    from .synth import AlignedSample
    from .tokenizer import TokenGrid

    g = cfg.generation
    model = load_backbone(_require(args.model, "model"))
    toks = load_tokenizers(_require(args.tokenizers, "tokenizers"))
    vocab = _load_vocab(args.vocab)
    samples = _load_samples(args.data)
    n = args.n_samples if args.n_samples is not None else g.n_samples
    inputs = _csv(args.inputs) or g.inputs
    targets = _csv(args.targets) or g.targets
    if vocab is None:
        targets = [t for t in targets if t not in ("caption", "geolocation")]
    chain = g.chain if args.chain is None else args.chain
    temperature = g.temperature if args.temperature is None else args.temperature
    decode_steps = g.decode_steps if args.decode_steps is None else args.decode_steps
    diffusion_steps = g.diffusion_steps if args.diffusion_steps is None else args.diffusion_steps
    generated, provenance = [], {}
    for i, s in enumerate(samples[:n]):
        inp = sample_inputs(s, inputs, model, toks, vocab)
        req = GenerationRequest(inp, targets, temperature, decode_steps, diffusion_steps,
                                seed=cfg.module_seed("generate", s.sample_id))
        res = generate(model, req, vocab, chain=chain)
        decoded = detokenize_outputs(toks, res.outputs, req, vocab)
        rasters = {m: v for m, v in decoded.items() if m not in ("caption", "geolocation")}
        tokens = {m: (v.ids.tolist() if isinstance(v, TokenGrid) else list(map(int, v))) for m, v in res.outputs.items()}
        provenance[s.sample_id] = {"conditioning": res.provenance, "tokens": tokens, "chain": chain}
        geo = decoded.get("geolocation", s.geolocation)
        cap = decoded.get("caption", "")
        generated.append(AlignedSample(rasters, geo, cap, s.sample_id, {"source_inputs": inputs}))
    from .synth import default_modalities

    specs = default_modalities()
    write_dataset(generated, out, split="test", rng_seed=cfg.seed,
                  modalities=[specs[m] for m in targets if m in specs and specs[m].kind == "image"],
                  extra={"generated": True, "inputs": inputs, "targets": targets, "chain": chain,
                         "temperature": temperature})
    (out / "provenance.json").write_text(json.dumps(provenance, indent=1, sort_keys=True))
    _event(event="wrote", what="generations", n=len(generated), path=str(out))


def cmd_tim_finetune(args, cfg: RunConfig, out: Path):
    from .evaluation import summarize
    from .pipeline import load_tokenizers, segmentation_dataset, split_samples, task_classes
    from .pretrain import load_backbone
    from .tim import TimConfig, evaluate_segmentation, tim_finetune

    t = cfg.tim
    model = load_backbone(_require(args.model, "model"))
    toks = load_tokenizers(args.tokenizers) if args.tokenizers else None
    samples = _load_samples(args.data)
    task = args.task or t.task
    inputs = _csv(args.inputs) or t.inputs
    tim_mods = _csv(args.tim_modalities) if args.tim_modalities is not None else t.tim_modalities
    k = args.k if args.k is not None else t.k
    seeds = [int(s) for s in _csv(args.seeds)] if args.seeds else t.seeds
    train_s, val_s = split_samples(samples, cfg.data.val_fraction)
    train = segmentation_dataset(train_s, inputs, task, toks, model)
    val = segmentation_dataset(val_s, inputs, task, toks, model)
    rows, per_arm = [], {"baseline": [], "tim": []}
    key_class = 1 if task == "water" else None
    for seed in seeds:
        for arm, mods, kk in (("baseline", [], 0), ("tim", tim_mods, k)):
            tc = TimConfig(tim_modalities=mods, k=kk if mods else 0, n_classes=task_classes(task),
                           epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, freeze_backbone=t.freeze_backbone,
                           merge=t.merge, seed=seed)
            res = tim_finetune(model, train, tc, val)
            m = evaluate_segmentation(res, model, val)
            iou_key = m["iou"].get(key_class, float("nan")) if key_class is not None else m["miou"]
            rows.append([seed, arm, iou_key, m["miou"]])
            per_arm[arm].append((iou_key, m["miou"]))
    write_tsv(out / "results.tsv", ["seed", "arm", "iou", "miou"], rows)
    summary = []
    for arm, vals in per_arm.items():
        iou = summarize([v[0] for v in vals])
        miou = summarize([v[1] for v in vals])
        summary.append([arm, iou["mean"], iou["std"], miou["mean"], miou["std"], iou["n"]])
    diff = summary[1][1] - summary[0][1]
    write_tsv(out / "summary.tsv", ["arm", "iou_mean", "iou_std", "miou_mean", "miou_std", "n_seeds"], summary)
    write_tsv(out / "difference.tsv", ["metric", "tim_minus_baseline"], [["iou", diff]])
    _event(event="wrote", what="tim", task=task, tim_minus_baseline=diff, path=str(out))


# evaluate --------------------------------------------------------------------


def _eval_recon(args, cfg, out, figures):
    from .pipeline import load_tokenizers
    from .tokenizer import reconstruction_report

    toks = load_tokenizers(_require(args.tokenizers, "tokenizers"))
    samples = _load_samples(args.data)[: cfg.eval.recon_samples]
    units = {"optical": "reflectance", "radar": "dB", "lulc": "class id", "ndvi": "index",
             "dem": "m"}
    rows = []
    for m, tok in toks.items():
        r = reconstruction_report(tok, samples, cfg.eval.diffusion_steps, cfg.module_seed("eval", "recon", m))
        rows.append([m, r["MAE"], r["RMSE"], r["SSIM"], r["PSNR"], units.get(m, "")])
    write_tsv(out / "recon.tsv", ["modality", "MAE", "RMSE", "SSIM", "PSNR", "units"], rows)


def _eval_gen(args, cfg, out, figures):
    from .evaluation import consistency_score
    from .generation import GenerationRequest, detokenize_outputs, generate
    from .pipeline import load_tokenizers, sample_inputs
    from .pretrain import load_backbone
    from .synth import default_modalities
    from .tokenizer import encode_image, modality_metrics

    g = cfg.generation
    model = load_backbone(_require(args.model, "model"))
    toks = load_tokenizers(_require(args.tokenizers, "tokenizers"))
    vocab = _load_vocab(args.vocab)
    samples = _load_samples(args.data)[: g.n_samples]
    targets = [t for t in g.targets if t in toks]
    specs = default_modalities()
    per_mod: Dict[str, list] = {m: [] for m in targets}
    acc: Dict[str, list] = {m: [] for m in targets}
    consist = []
    panel = None
    for s in samples:
        inp = sample_inputs(s, g.inputs, model, toks, vocab)
        req = GenerationRequest(inp, targets, g.temperature, g.decode_steps, g.diffusion_steps,
                                seed=cfg.module_seed("eval", "gen", s.sample_id))
        res = generate(model, req, vocab, chain=g.chain)
        dec = detokenize_outputs(toks, res.outputs, req, vocab)
        for m in targets:
            per_mod[m].append(modality_metrics(specs[m], dec[m][None], s.rasters[m][None]))
            truth = encode_image(toks[m], s.rasters[m]).ids
            acc[m].append(float(np.mean(res.outputs[m].ids == truth)))
        if "lulc" in dec and "ndvi" in dec:
            consist.append(consistency_score(dec["lulc"], dec["ndvi"]))
        if panel is None:
            panel = (s, dec)
    rows = []
    for m in targets:
        keys = ("MAE", "RMSE", "SSIM", "PSNR")
        means = [float(np.mean([r[k] for r in per_mod[m] if np.isfinite(r[k])] or [np.inf])) for k in keys]
        rows.append([m, *means, float(np.mean(acc[m]))])
    write_tsv(out / "gen.tsv", ["modality", "MAE", "RMSE", "SSIM", "PSNR", "token_accuracy"], rows)
    if consist:
        write_tsv(out / "consistency.tsv", ["pairs", "consistency"], [[len(consist), float(np.mean(consist))]])
    if figures and panel is not None:
        from .plots import chain_panel

        chain_panel(panel[0], panel[1], g.inputs, out / "chain_panel.png")


def _eval_fewshot(args, cfg, out, figures):
    from .evaluation import few_shot_eval, pool_embeddings, summarize
    from .pipeline import load_tokenizers, sample_inputs
    from .pretrain import extract_embeddings, init_backbone, load_backbone
    from .synth import dominant_class

    e = cfg.eval
    model = load_backbone(_require(args.model, "model"))
    samples = _load_samples(args.data)
    inputs = [m for m in cfg.generation.inputs if m in model.config.pixel_channels]
    labels = np.array([dominant_class(s) for s in samples])
    rows = []
    import torch

    from .backbone import BackboneModel

    with torch.random.fork_rng():
        torch.manual_seed(cfg.module_seed("eval", "random_backbone"))
        random_model = BackboneModel(model.config)
    random_model.load_state_dict({k: v for k, v in model.state_dict().items() if k.startswith("pix_")}, strict=False)
    for name, net in (("pretrained", model), ("random", random_model)):
        feats = np.stack([extract_embeddings(net, {m: s.rasters[m] for m in inputs}) for s in samples])
        accs = few_shot_eval(pool_embeddings(feats), labels, e.n_way, e.k_shot, e.episodes,
                             cfg.module_seed("eval", "fewshot"))
        st = summarize(accs)
        rows.append([name, e.n_way, e.k_shot, e.episodes, st["mean"], st["std"]])
    write_tsv(out / "fewshot.tsv", ["backbone", "n_way", "k_shot", "episodes", "accuracy_mean", "accuracy_std"], rows)


def _eval_geoloc(args, cfg, out, figures):
    from .evaluation import geoloc_montecarlo, grid_mode
    from .pipeline import sample_inputs
    from .pretrain import load_backbone
    from .synth import region_of

    e = cfg.eval
    model = load_backbone(_require(args.model, "model"))
    vocab = _load_vocab(_require(args.vocab, "vocab"))
    samples = _load_samples(args.data)[: cfg.generation.n_samples]
    inputs = [m for m in cfg.generation.inputs if m in model.config.pixel_channels]
    rows, total = [], None
    for s in samples:
        grid = geoloc_montecarlo(model, sample_inputs(s, inputs, model, None, vocab), vocab,
                                 e.geoloc_temperature, e.geoloc_draws, cfg.module_seed("eval", "geoloc", s.sample_id))
        lat, lon = grid_mode(grid)
        true_region = region_of(*s.geolocation)
        mode_region = region_of(lat, lon)
        hit = true_region is not None and mode_region is not None and true_region.name == mode_region.name
        rows.append([s.sample_id, s.geolocation[0], s.geolocation[1], lat, lon, int(hit)])
        total = grid if total is None else total + grid
    write_tsv(out / "geoloc.tsv", ["sample_id", "true_lat", "true_lon", "mode_lat", "mode_lon", "region_hit"], rows)
    np.save(out / "geoloc.npy", total / len(samples))
    if figures:
        from .plots import geoloc_heatmap

        geoloc_heatmap(total / len(samples), out / "geoloc_heatmap.png")


def _eval_seg(args, cfg, out, figures):
    from .generation import GenerationRequest, zero_shot_segment
    from .metrics import binary_iou
    from .pipeline import load_tokenizers, sample_inputs
    from .pretrain import load_backbone
    from .synth import WATER

    model = load_backbone(_require(args.model, "model"))
    toks = load_tokenizers(_require(args.tokenizers, "tokenizers"))
    samples = _load_samples(args.data)[: cfg.generation.n_samples]
    inputs = [m for m in cfg.generation.inputs if m in model.config.pixel_channels]
    preds, refs = [], []
    for s in samples:
        inp = sample_inputs(s, inputs, model, toks)
        req = GenerationRequest(inp, ["lulc"], 0.0, cfg.generation.decode_steps, cfg.generation.diffusion_steps,
                                seed=cfg.module_seed("eval", "seg", s.sample_id))
        preds.append(zero_shot_segment(model, toks, inp, WATER, req))
        refs.append(s.rasters["lulc"][0] == WATER)
    pred, ref = np.stack(preds), np.stack(refs)
    majority = np.zeros_like(ref) if ref.mean() < 0.5 else np.ones_like(ref)
    write_tsv(out / "seg.tsv", ["method", "water_iou"],
              [["zero_shot", binary_iou(pred, ref)], ["majority_class", binary_iou(majority, ref)]])


def cmd_evaluate(args, cfg: RunConfig, out: Path):
    handlers = {"recon": _eval_recon, "gen": _eval_gen, "fewshot": _eval_fewshot, "geoloc": _eval_geoloc,
                "seg": _eval_seg}
    handlers[args.task](args, cfg, out, not args.no_figures)
    _event(event="wrote", what="evaluation", task=args.task, path=str(out))


def cmd_report(args, out: Path):
    from .report import build_report

    build_report([Path(r) for r in args.runs], out)
    _event(event="wrote", what="report", runs=len(args.runs), path=str(out))


# -- dispatch --------------------------------------------------------------------

FILE_OUTPUT = {"build-vocab", "detokenize"}
HANDLERS = {
    "synth-data": cmd_synth_data, "build-vocab": cmd_build_vocab, "train-tokenizer": cmd_train_tokenizer,
    "tokenize": cmd_tokenize, "detokenize": cmd_detokenize, "pretrain": cmd_pretrain, "generate": cmd_generate,
    "tim-finetune": cmd_tim_finetune, "evaluate": cmd_evaluate,
}


def dispatch(args) -> None:
    if args.command == "encode-text":
        return cmd_encode_text(args)
    if args.command == "encode-geo":
        return cmd_encode_geo(args)
    if args.command == "report":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _guarded(out, lambda: cmd_report(args, out))
    cfg = _config(args)
    out = _out_dir(args, cfg)
    if args.command in FILE_OUTPUT and not args.out:
        out = out / ("vocab.txt" if args.command == "build-vocab" else "raster.npy")
    run_dir = out.parent if args.command in FILE_OUTPUT else out
    run_dir.mkdir(parents=True, exist_ok=True)
    _event(event="start", command=args.command, seed=cfg.seed, config_hash=cfg.hash(), out=str(out))
    snapshot_dir = run_dir
    invocation = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    if args.command in FILE_OUTPUT:
        # keep one snapshot per file output
        snapshot_dir = run_dir / f"{out.name}.config"
    write_resolved(cfg, snapshot_dir, invocation)
    _guarded(run_dir, lambda: HANDLERS[args.command](args, cfg, out))


def _guarded(run_dir: Path, fn) -> None:
    marker = run_dir / "INCOMPLETE"
    try:
        fn()
    except BaseException as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    if marker.exists():
        marker.unlink()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        dispatch(args)
    except ConfigError as exc:
        print(f"geomask: config error at {exc.key_path}: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"geomask: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"geomask: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
