"""Joint Adam training of the denoiser and HFPM."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from ..denoiser import ConditionalUNet, init_params
from ..diffusion import make_schedule
from ..errors import EmptyDataset, NonFiniteLoss
from ..hfpm import HFPM, init_hfpm
from ..imaging import Dataset, batch_from_samples, sample_patch_pair
from ..vlg import Embedder, PromptPair
from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .losses import TERMS, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "total", *TERMS)


def build_models(config: TrainConfig) -> tuple[ConditionalUNet, HFPM]:
    denoiser = init_params(config.seed, config.base_channels, config.unet_levels, config.channels)
    hfpm = init_hfpm(config.seed + 1, config.channels, config.hfpm_width)
    return denoiser, hfpm


def load_prompts(config: TrainConfig) -> PromptPair:
    if config.prompt_embeddings:
        return PromptPair.from_file(config.prompt_embeddings, config.prompt_positive, config.prompt_negative)
    return PromptPair(config.prompt_positive, config.prompt_negative)


@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    old = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def write_loss_log(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def _nonfinite_state(iteration, breakdown, models) -> dict:
    bad = [
        name
        for model in models
        for name, p in model.named_parameters()
        if not torch.isfinite(p).all()
    ]
    return {"iteration": iteration, "breakdown": breakdown, "nonfinite_parameters": bad}


def train(
    config: TrainConfig,
    data: Dataset,
    embedder: Embedder,
    out_dir=None,
    models: tuple[ConditionalUNet, HFPM] | None = None,
) -> tuple[list[Checkpoint], list[dict]]:
    """Run ``config.iterations`` optimisation steps.

    Returns the checkpoint trail (every ``checkpoint_every`` iterations and at
    the end) and the per-iteration loss log. With ``out_dir`` the checkpoints,
    ``loss_log.csv`` and ``config.txt`` are written there as well.
    """
    if len(data) == 0:
        raise EmptyDataset("training needs at least one pair")
    config.validate()
    out = Path(out_dir) if out_dir is not None else None
    schedule = make_schedule(config.timesteps, config.beta_start, config.beta_end, config.schedule)
    denoiser, hfpm = models if models is not None else build_models(config)
    denoiser.train()
    hfpm.train()
    params = list(denoiser.parameters()) + list(hfpm.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    lr_sched = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, config.iterations)
        if config.lr_schedule == "cosine" else None
    )
    prompts = load_prompts(config)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 12345)

    if out is not None:
        from .config import format_config

        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(config))

    rows: list[dict] = []
    trail: list[Checkpoint] = []
    with _single_thread(config.deterministic):
        for it in range(1, config.iterations + 1):
            idx = rng.integers(0, len(data), size=config.batch_size)
            patches = [
                sample_patch_pair(data[int(i)], config.patch_size, rng, config.levels, config.hflip)
                for i in idx
            ]
            low, high = batch_from_samples(patches)
            loss, breakdown = total_loss(low, high, denoiser, hfpm, config, embedder, schedule, prompts, gen)
            if not math.isfinite(loss.item()):
                state = _nonfinite_state(it, breakdown, (denoiser, hfpm))
                if out is not None:
                    (out / "nonfinite_dump.json").write_text(json.dumps(state, indent=2))
                raise NonFiniteLoss(f"non-finite loss at iteration {it}: {breakdown}", state)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if lr_sched is not None:
                lr_sched.step()

            rows.append({"iteration": it, "total": loss.item(), **breakdown})
            if it % config.log_every == 0:
                log.info("iter %d total %.5f %s", it, loss.item(),
                         " ".join(f"{k}={v:.4f}" for k, v in breakdown.items()))
            if it % config.checkpoint_every == 0 or it == config.iterations:
                ckpt = Checkpoint.capture(denoiser, hfpm, schedule, config, it)
                trail.append(ckpt)
                if out is not None:
                    save_checkpoint(ckpt, out / f"ckpt_{it:07d}.bin")
                    write_loss_log(rows, out / "loss_log.csv")
    if out is not None:
        save_checkpoint(trail[-1], out / "final.bin")
    return trail, rows
