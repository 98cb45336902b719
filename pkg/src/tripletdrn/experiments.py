"""Desk-scale experiments shared by the command line and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, ImageRecord, SynthSpec, center_crop, generate_groups, generate_synthetic, resize
from .miner import MiningStrategy
from .model import MiniDRN, ModelConfig, build_model, embed_batch, five_crop_embed, param_count
from .retrieval import EvalReport, build_index, evaluate_groups, evaluate_retrieval
from .trainer import EpochStats, TrainConfig, preset, train


def prepare(records: list[ImageRecord], cfg: TrainConfig) -> np.ndarray:
    """Stack images after the optional resize then center-crop of the training recipe."""
    out = []
    for r in records:
        if cfg.resize:
            r = resize(r, cfg.resize)
        if cfg.crop:
            r = center_crop(r, cfg.crop)
        out.append(r.pixels)
    return np.stack(out)


def embed_records(model: MiniDRN, records: list[ImageRecord]) -> np.ndarray:
    """Embeddings at inference; images larger than the input use five-crop averaging."""
    size = model.config.input_size
    plain = [r for r in records if r.pixels.shape[1:] == (size, size)]
    if len(plain) == len(records):
        return embed_batch(np.stack([r.pixels for r in records]), model)
    return np.stack([five_crop_embed(r.pixels, model, crop=size, id=r.id).values for r in records])


def evaluate_dataset(model: MiniDRN, ds: Dataset, ks=(1, 5, 10), config: dict | None = None) -> EvalReport:
    """mP@k on query/gallery data, or recall@4 on a groups dataset."""
    start = time.perf_counter()
    if ds.kind == "groups":
        recs = ds.splits["groups"]
        emb = embed_records(model, recs)
        extracted = time.perf_counter()
        index = build_index(zip([r.id for r in recs], emb))
        labels = {r.id: r.label for r in recs}
        first = {}
        for r in recs:
            first.setdefault(r.label, r.id)
        report = evaluate_groups(index, labels, list(first.values()), param_count(model), config)
    else:
        gallery, queries = ds.splits["gallery"], ds.splits["query"]
        index = build_index(zip([r.id for r in gallery], embed_records(model, gallery)))
        qemb = embed_records(model, queries)
        extracted = time.perf_counter()
        report = evaluate_retrieval(
            index,
            {r.id: r.label for r in gallery},
            [(r.id, v, r.label) for r, v in zip(queries, qemb)],
            ks,
            param_count(model),
            config,
        )
    report.timings["feature_extraction"] = extracted - start
    report.timings["search"] = time.perf_counter() - extracted
    return report


@dataclass
class RunResult:
    seed: int
    strategy: str
    random_report: EvalReport | None
    report: EvalReport
    stats: list[EpochStats]
    model: MiniDRN
    seconds: float

    def metric(self, k: int = 5) -> float:
        return self.report.recall4 if self.report.recall4 is not None else self.report.mp[k]

    def random_metric(self, k: int = 5) -> float:
        r = self.random_report
        return r.recall4 if r.recall4 is not None else r.mp[k]


@dataclass
class DeskSetup:
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: preset("desk"))
    groups: int = 200
    train_per_group: int = 12


def run(
    setup: DeskSetup,
    seed: int,
    kind: str = "retrieval",
    strategy: str | None = None,
    ds: Dataset | None = None,
    with_random: bool = True,
) -> RunResult:
    """Generate data, evaluate the random init, train, evaluate again."""
    start = time.perf_counter()
    if ds is None:
        ds = generate_groups(setup.synth, seed, setup.groups, setup.train_per_group) if kind == "groups" else generate_synthetic(setup.synth, seed)
    cfg = replace(setup.train, seed=seed, strategy=strategy or setup.train.strategy)
    model = build_model(setup.model, seed)
    random_report = evaluate_dataset(model, ds) if with_random else None
    train_recs = ds.splits["train"]
    stats = train(model, prepare(train_recs, cfg), [r.label for r in train_recs], cfg)
    report = evaluate_dataset(model, ds, config={"train": cfg.to_dict(), "model": setup.model.to_dict()})
    return RunResult(seed, cfg.strategy, random_report, report, stats, model, time.perf_counter() - start)


def compare_miners(setup: DeskSetup, seeds=range(5), k: int = 5, log=None) -> dict[str, list[float]]:
    """mP@k per seed for each mining strategy; the dataset is shared across strategies."""
    table: dict[str, list[float]] = {s.value: [] for s in MiningStrategy}
    for seed in seeds:
        ds = generate_synthetic(setup.synth, seed)
        for s in MiningStrategy:
            res = run(setup, seed, strategy=s.value, ds=ds, with_random=False)
            table[s.value].append(res.metric(k))
            if log:
                log(f"seed {seed} {s.value}: mP@{k} {res.metric(k):.3f} ({res.seconds:.0f}s)")
    return table


def format_table(table: dict[str, list[float]], k: int = 5) -> str:
    """Strategies ranked by median, best first."""
    lines = [f"{'strategy':<24} {'median mP@' + str(k):>12}  per seed"]
    for name, vals in sorted(table.items(), key=lambda kv: -np.median(kv[1])):
        lines.append(f"{name:<24} {np.median(vals):>12.3f}  " + " ".join(f"{v:.3f}" for v in vals))
    return "\n".join(lines)
