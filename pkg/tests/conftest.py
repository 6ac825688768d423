"""Shared tiny artifacts: 32x32 samples, small tokenizers, a briefly trained backbone."""

from types import SimpleNamespace

import pytest
import torch

from geomask.config import config_from_dict
from geomask.masking import MaskingConfig
from geomask.pipeline import train_tokenizers, vocab_sizes
from geomask.pretrain import PretrainConfig, build_corpus, default_backbone_config, pretrain
from geomask.synth import generate_samples
from geomask.text import build_vocab

# one "[PASS]/[FAIL] name: detail" line per acceptance criterion, echoed in the summary
ACCEPTANCE: list = []

TINY_RUN = {
    "tokenizers": {"enc_dim": 16, "dec_dim": 16, "dec_blocks": 1, "epochs": 1, "batch_size": 8, "val_steps": 2},
}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _few_threads():
    torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny():
    torch.set_num_threads(2)
    cfg = config_from_dict(TINY_RUN)
    samples = generate_samples(40, seed=11, size=(32, 32))
    train, val = samples[:32], samples[32:]
    tokenizers = train_tokenizers(train, cfg)
    vocab = build_vocab([s.caption for s in train])
    train_corpus = build_corpus(train, tokenizers, vocab)
    val_corpus = build_corpus(val, tokenizers, vocab)
    backbone = default_backbone_config(
        train_corpus, vocab_sizes(tokenizers, vocab), dim=32, heads=2, depth_encoder=1, depth_decoder=1
    )
    masking = MaskingConfig(input_budget=8, target_budget=8)
    pcfg = PretrainConfig(steps=20, batch_size=8, warmup_steps=2, val_every=0)
    state = pretrain(train_corpus, None, masking, backbone, pcfg)
    return SimpleNamespace(
        cfg=cfg, samples=samples, train=train, val=val, tokenizers=tokenizers, vocab=vocab,
        train_corpus=train_corpus, val_corpus=val_corpus, backbone_config=backbone, masking=masking,
        pretrain_config=pcfg, model=state.model,
    )


def pipeline_steps(root, config_path, vocab=True):
    """Argument lists for a full synth -> report CLI run under ``root``."""
    c = ["--config", str(config_path)]
    d, toks, corpus, bb = root / "data", root / "toks", root / "corpus", root / "bb"
    voc = root / "vocab.txt"
    vflag = ["--vocab", str(voc)] if vocab else []
    common = ["--model", str(bb / "backbone.pt"), "--tokenizers", str(toks), "--data", str(d)]
    steps = [
        ["synth-data", *c, "--out", str(d)],
        ["build-vocab", *c, "--data", str(d), "--out", str(voc)],
        ["train-tokenizer", *c, "--data", str(d), "--out", str(toks)],
        ["tokenize", *c, "--model", str(toks), "--data", str(d), *vflag, "--out", str(corpus)],
        ["pretrain", *c, "--data", str(corpus), "--out", str(bb)],
        ["generate", *c, *common, *vflag, "--out", str(root / "gen")],
        ["tim-finetune", *c, "--model", str(bb / "backbone.pt"), "--tokenizers", str(toks), "--data", str(d),
         "--out", str(root / "tim")],
    ]
    for task in ("recon", "gen", "fewshot", "geoloc", "seg"):
        steps.append(["evaluate", *c, "--task", task, *common, *vflag, "--out", str(root / f"eval_{task}")])
    runs = [str(root / r) for r in ("bb", "tim", "eval_recon", "eval_gen", "eval_fewshot", "eval_geoloc", "eval_seg")]
    steps.append(["report", "--runs", *runs, "--out", str(root / "report")])
    return steps


TINY_CLI = {
    "data": {"n_samples": 14, "size": 32},
    "tokenizers": {"enc_dim": 16, "dec_dim": 16, "dec_blocks": 1, "epochs": 1, "batch_size": 8, "val_steps": 2},
    "backbone": {"dim": 32, "depth_encoder": 1, "depth_decoder": 1, "heads": 2},
    "masking": {"input_budget": 8, "target_budget": 8},
    "pretrain": {"steps": 4, "batch_size": 4, "warmup_steps": 1, "val_every": 2, "val_samples": 4},
    "generation": {"n_samples": 2, "diffusion_steps": 2},
    "tim": {"epochs": 1, "seeds": [0, 1], "batch_size": 4},
    "eval": {"n_way": 2, "episodes": 5, "geoloc_draws": 10, "recon_samples": 2, "diffusion_steps": 2},
}
