"""
Command-line workbench: train, measure, cluster, report and gen-data.

Every phase reads the same experiment config, writes under
``<output>/seed_<seed>/`` and records the config hash in its outputs.
Exit codes: 0 ok, 1 failure (including more than 10% failed grid cells),
2 usage or configuration error.
"""
import argparse
import datetime
import glob
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import llc
from ablation import AblationSpec, ablated_icl_score, ablation_score, export_tokens_in_context, icl_score, tokens_in_context
from clustering import TrajectoryMatrix, adjusted_rand, cluster, contingency, export_clustering, transfer_labels, vote_report
from config import ConfigError, ExperimentConfig, apply_overrides, config_hash, grid_targets, load_config
from datagen import (CorpusSource, DataSource, PatternSpec, SyntheticSource, ingest_corpus, model_generator_source,
                     nested_dyck_source, repeated_random_batch, unnested_dyck_source)
from head_analysis import (HeadReport, PatternMatcher, attention_scores, classify_head, export_reports,
                           k_composition_trajectory)
from hessian import fim_trace, hessian_rank, hessian_trace, max_abs_eigenvalue
from results_store import (TOOL_VERSION, CellKey, ResultsStore, TrajectoryParseError, read_trajectory_csv, run_grid,
                           write_json, write_trajectory_csv)
from tokenizer import ByteTokenizer
from train import LOSS_CURVE_NAME, log_schedule, train, train_reference
from transformer import Checkpoint, DivergenceError, HeadId, checkpoint_path, list_checkpoints, load_checkpoint
from visualization import plot_loss_curve, plot_trajectories, save_svg

logger = logging.getLogger(__name__)

PHASES = ("llc", "hessian", "ablate", "classify", "compose")
FAILURE_THRESHOLD = 0.1
ABLATION_EVAL_STREAM = 2
STATS_STREAM = 3
POOL_STREAM = 4
NATURAL_STREAM = 5
ICL_STREAM = 6
TRAJECTORY_FILES = {
    "llc": "llc.csv",
    "hessian": "hessian.csv",
    "ablate": "ablation.csv",
    "classify": "attention.csv",
    "compose": "composition.csv",
}


def setup_logging(level: str = "INFO", log_dir: Optional[str] = None):
    """Console logging, plus a timestamped file log when ``log_dir`` is given."""
    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigError("--log-level", f"unknown level '{level}'")
    root_logger.setLevel(numeric)

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    root_logger.addHandler(console)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        timestamp = datetime.datetime.now().strftime("%Y%m%d_%H%M%S")
        file_handler = logging.FileHandler(os.path.join(log_dir, f"workbench_{timestamp}.log"), mode='w')
        file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        root_logger.addHandler(file_handler)


def derive_seed(seed: int, offset: int) -> int:
    return int(np.random.SeedSequence([seed, offset]).generate_state(1)[0])


def parse_head(name: str) -> HeadId:
    _, layer, head = name.split("_")
    return int(layer), int(head)


def head_name(head: HeadId) -> str:
    return f"head_{head[0]}_{head[1]}"


class Run:
    """Paths and lazily built sources, references and store for one seed."""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.config = config
        self.seed = seed
        self.root = os.path.join(config.output, f"seed_{seed}")
        # per seed: a --seed-override run shares cells with the full run
        self.config_hash = config_hash(replace(config, seeds=(seed,)))
        self._sources: Dict[str, DataSource] = {}
        self._references: Dict[str, Checkpoint] = {}
        self._tokenizer: Optional[ByteTokenizer] = None
        self._store: Optional[ResultsStore] = None

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    @property
    def store(self) -> ResultsStore:
        if self._store is None:
            self._store = ResultsStore(self.path("store"))
        return self._store

    def tokenizer(self) -> Optional[ByteTokenizer]:
        if self._tokenizer is None and self.config.training.tokenizer:
            self._tokenizer = ByteTokenizer.load(self.config.training.tokenizer)
        return self._tokenizer

    def pattern_spec(self, name: str) -> PatternSpec:
        section = self.config.data[name]
        if section.pattern_spec:
            return PatternSpec.load(section.pattern_spec)
        return PatternSpec.default(self.config.model.vocab_size)

    def source(self, name: str) -> DataSource:
        if name in self._sources:
            return self._sources[name]
        section = self.config.data[name]
        context = self.config.model.context_length
        seed = derive_seed(self.seed, section.seed)
        if section.kind == "synthetic":
            source = SyntheticSource(self.pattern_spec(name), context, seed)
        elif section.kind == "code_like":
            source = SyntheticSource(self.pattern_spec(name).code_like(), context, seed)
        elif section.kind == "nested_dyck":
            source = nested_dyck_source(self.pattern_spec(name), context, seed)
        elif section.kind == "unnested_dyck":
            source = unnested_dyck_source(self.pattern_spec(name), context, seed)
        elif section.kind == "corpus":
            source = CorpusSource.from_file(section.path, context, seed, tokenizer=self.tokenizer())
        elif section.kind == "model_generator":
            source = model_generator_source(self.reference(section.reference), seed=seed,
                                            temperature=section.temperature, context_length=context)
        else:
            raise ValueError(f"data source '{name}' is a model-refined loss, not a token distribution")
        self._sources[name] = source
        return source

    def loss_source(self, name: str, samples: Optional[int] = None) -> llc.SourceSpec:
        """A data source, or for model-refined entries a per-checkpoint KL loss factory."""
        section = self.config.data[name]
        if section.kind != "model_refined":
            return self.source(name)
        reference = self.reference(section.reference)
        base = self.source(section.source)
        sgld = self.config.sgld

        def factory(checkpoint: Checkpoint) -> llc.BoundLoss:
            return llc.KlLoss(reference.params, base, checkpoint.config, minibatch_size=sgld.minibatch_size,
                              eval_sequences=samples or llc.eval_sequences_for(sgld, base.context_length))

        return factory

    def bound(self, name: str, checkpoint: Checkpoint, samples: int):
        spec = self.loss_source(name, samples)
        return spec if isinstance(spec, DataSource) else spec(checkpoint)

    def reference(self, name: str) -> Checkpoint:
        """The named reference model, trained on first use and reloaded afterwards."""
        if name in self._references:
            return self._references[name]
        section = self.config.references[name]
        out_dir = self.path("references", name)
        if section.steps in list_checkpoints(out_dir):
            checkpoint = load_checkpoint(checkpoint_path(out_dir, section.steps))
        else:
            logger.info(f"Training {section.n_layers}-layer reference '{name}' for {section.steps} steps")
            checkpoint = train_reference(self.config.model, section.n_layers, self.source(section.source),
                                         section.steps, self.config.training.batch_size, self.config.optimizer,
                                         seed=self.seed, out_dir=out_dir, config_hash=self.config_hash)
        self._references[name] = checkpoint
        return checkpoint

    def checkpoints(self) -> List[Checkpoint]:
        steps = list_checkpoints(self.root)
        if not steps:
            raise FileNotFoundError(f"no checkpoints under {self.root}; run 'train' first")
        chosen = steps[::self.config.grid.checkpoint_stride]
        if chosen[-1] != steps[-1]:
            chosen.append(steps[-1])
        return [load_checkpoint(checkpoint_path(self.root, step)) for step in chosen]

    def head_masks(self, checkpoint: Checkpoint) -> Dict[str, llc.WeightMask]:
        available = llc.head_targets(checkpoint.params)
        names = grid_targets(self.config, checkpoint.config)
        missing = [n for n in names if n not in available]
        if missing:
            raise ConfigError("grid.targets", f"targets {missing} do not exist in the model")
        return {n: available[n] for n in names}


def _row(key: CellKey, value: Optional[dict]) -> dict:
    row = {"step": key.step, "target": key.target, "source": key.source, "metric": key.metric,
           "value": None, "stderr": None}
    if value is not None:
        row["value"] = value["value"]
        row["stderr"] = value.get("stderr")
    return row


def _grid(run: Run, keys: Sequence[CellKey], compute: Callable[[CellKey], dict]) -> List[dict]:
    results = run_grid(keys, compute, store=run.store, workers=run.config.workers, progress=True)
    return [_row(key, value) for key, value in results]


def measure_llc(run: Run, checkpoints: List[Checkpoint]) -> List[dict]:
    targets = run.head_masks(checkpoints[0])
    sources = {name: run.loss_source(name) for name in run.config.grid.sources}
    return llc.trajectory(checkpoints, targets, sources, run.config.sgld, store=run.store,
                          workers=run.config.workers, config_hash=run.config_hash, progress=True)


def measure_hessian(run: Run, checkpoints: List[Checkpoint]) -> List[dict]:
    config = run.config
    targets = run.head_masks(checkpoints[0])
    by_step = {c.step: c for c in checkpoints}
    keys = []
    for checkpoint in checkpoints:
        for target in targets:
            for metric in config.grid.hessian_metrics:
                sources = ["self"] if metric == "fim_trace" else config.grid.sources
                keys.extend(CellKey(run.config_hash, checkpoint.step, target, s, metric) for s in sources)

    def compute(key):
        checkpoint = by_step[key.step]
        params, mask = checkpoint.params, targets[key.target]
        if key.metric == "fim_trace":
            return fim_trace(params, config.trace, seed=config.trace.seed, mask=mask).to_dict()
        if key.metric == "hessian_trace":
            return hessian_trace(params, mask, run.bound(key.source, checkpoint, config.trace.samples),
                                 config.trace).to_dict()
        data = run.bound(key.source, checkpoint, config.rank.samples)
        if key.metric == "max_eig":
            return {"value": max_abs_eigenvalue(params, mask, data, config.rank.power_iterations,
                                                config.rank.samples, config.rank.seed)}
        method = key.metric[len("hessian_rank_"):]
        return hessian_rank(params, mask, data, replace(config.rank, method=method)).to_dict()

    return _grid(run, keys, compute)


def measure_ablations(run: Run, checkpoints: List[Checkpoint]) -> List[dict]:
    config = run.config
    section = config.ablation
    source = run.source(section.source)
    eval_tokens = source.sample_batch(section.eval_sequences, 0, ABLATION_EVAL_STREAM)
    stats_tokens = source.sample_batch(section.stats_size, 0, STATS_STREAM)
    icl_tokens = source.sample_batch(config.icl.sequences, 0, ICL_STREAM)
    by_step = {c.step: c for c in checkpoints}
    heads = [head_name(h) for h in checkpoints[0].config.heads]
    keys = []
    for checkpoint in checkpoints:
        keys.append(CellKey(run.config_hash, checkpoint.step, "model", section.source, "icl"))
        for head in heads:
            keys.extend(CellKey(run.config_hash, checkpoint.step, head, section.source, f"ablation_{kind}")
                        for kind in section.kinds)
            keys.append(CellKey(run.config_hash, checkpoint.step, head, section.source, "icl_ablated"))

    def compute(key):
        params = by_step[key.step].params
        if key.metric == "icl":
            return {"value": icl_score(params, icl_tokens, config.icl.early, config.icl.late)}
        head = parse_head(key.target)
        if key.metric == "icl_ablated":
            return {"value": ablated_icl_score(params, head, icl_tokens, stats_tokens,
                                               config.icl.early, config.icl.late)}
        spec = AblationSpec((head,), kind=key.metric[len("ablation_"):], stats_size=section.stats_size,
                            roll_offset=section.roll_offset)
        return {"value": ablation_score(params, spec, eval_tokens, stats_tokens)}

    return _grid(run, keys, compute)


def measure_classification(run: Run, checkpoints: List[Checkpoint]) -> List[dict]:
    """HeadReports per checkpoint plus attention-score trajectory rows."""
    config = run.config
    section = config.ablation
    source = run.source(section.source)
    model = checkpoints[0].config
    pool = source.sample_batch(section.pool_sequences, 0, POOL_STREAM)
    stats_tokens = source.sample_batch(section.stats_size, 0, STATS_STREAM)
    natural = source.sample_batch(config.classify.natural_sequences, 0, NATURAL_STREAM)
    period_length = model.context_length - model.context_length % 2
    repeated = repeated_random_batch(model.vocab_size, config.classify.repeated_sequences, period_length,
                                     seed=derive_seed(run.seed, NATURAL_STREAM))
    matcher = PatternMatcher.from_spec(source.spec) if isinstance(source, SyntheticSource) else PatternMatcher([], [])
    top_k = min(section.top_k, pool.shape[0] * (pool.shape[1] - 1))
    by_step = {c.step: c for c in checkpoints}
    keys = [CellKey(run.config_hash, c.step, head_name(h), section.source, "head_report")
            for c in checkpoints for h in model.heads]

    def compute(key):
        params = by_step[key.step].params
        head = parse_head(key.target)
        items = tokens_in_context(params, head, pool, top_k, stats_tokens)
        scores = attention_scores(params, head, natural, repeated)
        return classify_head(head, items, pool, matcher, scores, config.classify.thresholds).to_dict()

    results = run_grid(keys, compute, store=run.store, workers=config.workers, progress=True)
    rows = []
    reports_by_step: Dict[int, List[HeadReport]] = {}
    for key, value in results:
        report = HeadReport.from_dict(value) if value is not None else None
        if report is not None:
            reports_by_step.setdefault(key.step, []).append(report)
        for metric in ("previous_token_score", "current_token_score", "induction_score", "multigram_count"):
            rows.append({"step": key.step, "target": key.target, "source": key.source, "metric": metric,
                         "value": float(getattr(report, metric)) if report else None})
    for step, reports in sorted(reports_by_step.items()):
        export_reports(reports, run.path("heads"), step, run.config_hash, TOOL_VERSION)

    final = checkpoints[-1]
    tokenizer = run.tokenizer()
    decode = tokenizer.decode if tokenizer is not None else None
    for head in model.heads:
        items = tokens_in_context(final.params, head, pool, top_k, stats_tokens)
        export_tokens_in_context(items, pool, run.path("heads", f"tokens_in_context_{head_name(head)}.jsonl"),
                                 run.config_hash, TOOL_VERSION, decode=decode)
    return rows


def measure_composition(run: Run, checkpoints: List[Checkpoint]) -> List[dict]:
    model = checkpoints[0].config
    if model.n_layers < 2:
        logger.warning("Composition scores need a two-layer model; writing an empty trajectory")
        return []
    pairs = [((0, a), (1, b)) for a in range(model.n_heads) for b in range(model.n_heads)]
    return k_composition_trajectory(checkpoints, pairs)


MEASURES = {
    "llc": measure_llc,
    "hessian": measure_hessian,
    "ablate": measure_ablations,
    "classify": measure_classification,
    "compose": measure_composition,
}


def failed_fraction(rows: Sequence[dict]) -> float:
    if not rows:
        return 0.0
    return sum(1 for r in rows if r.get("value") is None) / len(rows)


def cmd_train(config: ExperimentConfig, args) -> int:
    status = 0
    for seed in config.seeds:
        run = Run(config, seed)
        steps = config.training.steps
        if steps in list_checkpoints(run.root) and os.path.exists(run.path(LOSS_CURVE_NAME)):
            logger.info(f"Seed {seed}: training already complete at step {steps}; nothing to do")
        else:
            tokenizer = run.tokenizer()
            if config.training.tokenizer:
                os.makedirs(run.root, exist_ok=True)
                shutil.copyfile(config.training.tokenizer, run.path("tokenizer.json"))
            try:
                train(config.model, run.source(config.training.source), steps, config.training.batch_size,
                      config.optimizer, schedule=log_schedule(steps, config.training.checkpoints_per_decade),
                      seed=seed, out_dir=run.root,
                      tokenizer_hash=tokenizer.content_hash() if tokenizer else None, progress=True,
                      config_hash=run.config_hash)
            except DivergenceError as e:
                logger.error(f"Seed {seed}: {e}")
                status = 1
                continue
        for name in config.references:
            run.reference(name)
    return status


def cmd_measure(config: ExperimentConfig, args) -> int:
    status = 0
    for seed in config.seeds:
        run = Run(config, seed)
        checkpoints = run.checkpoints()
        logger.info(f"Seed {seed}: measuring phase '{args.phase}' over {len(checkpoints)} checkpoints")
        rows = MEASURES[args.phase](run, checkpoints)
        value_column = "lambda_hat" if args.phase == "llc" else "value"
        write_trajectory_csv(rows, run.path("trajectories", TRAJECTORY_FILES[args.phase]), run.config_hash,
                             value_column)
        fraction = failed_fraction(rows)
        if fraction > FAILURE_THRESHOLD:
            logger.error(f"Seed {seed}: {fraction:.0%} of {args.phase} cells failed")
            status = 1
        elif fraction:
            logger.warning(f"Seed {seed}: {fraction:.0%} of {args.phase} cells failed")
    return status


def load_trajectories(run: Run) -> pd.DataFrame:
    frames = [read_trajectory_csv(path) for path in sorted(glob.glob(run.path("trajectories", "*.csv")))]
    columns = ["step", "target", "source", "metric", "value"]
    if not frames:
        return pd.DataFrame(columns=columns)
    return pd.concat([f[columns] for f in frames], ignore_index=True)


def latest_reports(run: Run) -> List[HeadReport]:
    paths = sorted(glob.glob(run.path("heads", "head_reports_step_*.json")))
    if not paths:
        return []
    with open(paths[-1]) as f:
        document = json.load(f)
    return [HeadReport.from_dict(r) for r in document["reports"]]


def cluster_matrix(run: Run, frame: pd.DataFrame, request) -> TrajectoryMatrix:
    heads = [head_name(h) for h in run.config.model.heads]
    segments = [(request.metric, source) for source in request.sources]
    return TrajectoryMatrix.from_frame(frame, segments, targets=heads)


def _cluster_request(run: Run, matrix: TrajectoryMatrix, request):
    options = {"window": request.window} if request.algorithm == "dtw" else {}
    return cluster(matrix, request.algorithm, request.k, seed=run.seed, normalize=request.normalize, **options)


def cmd_cluster(config: ExperimentConfig, args) -> int:
    for seed in config.seeds:
        run = Run(config, seed)
        frame = load_trajectories(run)
        types = {r.name: r.type_label for r in latest_reports(run)}
        results = {}
        for request in config.clustering:
            matrix = cluster_matrix(run, frame, request)
            result = _cluster_request(run, matrix, request)
            export_clustering(result, matrix, run.path("clusters"), run.config_hash, TOOL_VERSION)
            if types:
                table = contingency(result.labels, matrix.heads, types)
                table.assign(config_hash=run.config_hash, tool_version=TOOL_VERSION).to_csv(
                    run.path("clusters", f"contingency_{result.algorithm}.csv"))
            results[result.algorithm] = (result, matrix)
        if len(results) > 1:
            first_matrix = next(iter(results.values()))[1]
            votes = vote_report({name: r for name, (r, _) in results.items()}, first_matrix.heads)
            votes.assign(config_hash=run.config_hash, tool_version=TOOL_VERSION).to_csv(
                run.path("clusters", "votes.csv"), index=False)
    return 0


def _final_values(frame: pd.DataFrame, metric: str) -> Dict[str, Dict[str, float]]:
    part = frame[(frame["metric"] == metric)].dropna(subset=["value"])
    if part.empty:
        return {}
    final = part[part["step"] == part["step"].max()]
    out: Dict[str, Dict[str, float]] = {}
    for row in final.sort_values(["source", "target"]).itertuples(index=False):
        out.setdefault(row.source, {})[row.target] = float(row.value)
    return out


def seed_section(run: Run) -> dict:
    frame = load_trajectories(run)
    reports = latest_reports(run)
    clusters = {}
    for path in sorted(glob.glob(run.path("clusters", "clusters_*.json"))):
        with open(path) as f:
            document = json.load(f)
        clusters[document["algorithm"]] = {
            "k": document["k"],
            "labels": dict(zip(document["heads"], document["labels"])),
            "metrics": document["metrics"],
        }
    final_llc = _final_values(frame, "llc")
    training = final_llc.get(run.config.training.source, {})
    multigram = [
        {"head": r.name, "multigram_count": r.multigram_count, "type": r.type_label,
         "final_wrllc": training.get(r.name)}
        for r in reports
    ]
    icl = _final_values(frame, "icl")
    ablation = {kind: _final_values(frame, f"ablation_{kind}") for kind in run.config.ablation.kinds}
    return {
        "seed": run.seed,
        "head_reports": [r.to_dict() for r in reports],
        "clusters": clusters,
        "final_llc": final_llc,
        "multigram_vs_wrllc": multigram,
        "icl": {"final": icl, "ablated": _final_values(frame, "icl_ablated")},
        "ablation": {k: v for k, v in ablation.items() if v},
    }


def transfer_block(config: ExperimentConfig) -> List[dict]:
    """Fit on the first seed, transfer to every other seed, and compare with that seed's own clustering."""
    runs = [Run(config, seed) for seed in config.seeds]
    frames = [load_trajectories(run) for run in runs]
    block = []
    for request in config.clustering:
        try:
            matrices = [cluster_matrix(run, frame, request) for run, frame in zip(runs, frames)]
        except ValueError as e:
            logger.warning(f"Skipping transfer for {request.algorithm}: {e}")
            continue
        fitted = _cluster_request(runs[0], matrices[0], request)
        for run, matrix in zip(runs[1:], matrices[1:]):
            own = _cluster_request(run, matrix, request)
            transferred = transfer_labels(fitted, matrix)
            block.append({"algorithm": request.algorithm, "from_seed": runs[0].seed, "to_seed": run.seed,
                          "ari": adjusted_rand(transferred, own.labels)})
    return block


def cmd_report(config: ExperimentConfig, args) -> int:
    document = {"name": config.name, "seeds": [seed_section(Run(config, seed)) for seed in config.seeds]}
    if len(config.seeds) > 1:
        document["transfer"] = transfer_block(config)
    path = write_json(os.path.join(config.output, "report.json"), document, config_hash(config))
    logger.info(f"Wrote report to {path}")
    if args.svg:
        for seed in config.seeds:
            write_charts(Run(config, seed))
    return 0


def write_charts(run: Run):
    frame = load_trajectories(run)
    types = {r.name: r.type_label for r in latest_reports(run)}
    for source in run.config.grid.sources:
        save_svg(plot_trajectories(frame, "llc", source, types), run.path("charts", f"llc_{source}.svg"))
    curve_path = run.path(LOSS_CURVE_NAME)
    if os.path.exists(curve_path):
        save_svg(plot_loss_curve(pd.read_csv(curve_path)), run.path("charts", "loss_curve.svg"))


def cmd_gen_data(config: ExperimentConfig, args) -> int:
    run = Run(config, config.seeds[0])
    out_dir = run.path("data")
    os.makedirs(out_dir, exist_ok=True)
    if args.text:
        tokenizer = run.tokenizer()
        if tokenizer is None:
            with open(args.text, encoding="utf-8") as f:
                tokenizer = ByteTokenizer.train(f.read(), args.vocab_size or config.model.vocab_size)
        tokenizer.save(os.path.join(out_dir, "tokenizer.json"))
        ingest_corpus(args.text, tokenizer, os.path.join(out_dir, "corpus.bin"))
        return 0
    name = args.source or config.training.source
    if name not in config.data:
        raise ConfigError("--source", f"unknown data source '{name}'")
    source = run.source(name)
    tokens, annotations = source.sample_annotated(args.sequences, index=args.index)
    document = {
        "source": name,
        "description": source.describe(),
        "index": args.index,
        "tokens": tokens.tolist(),
        "annotations": [[a.to_dict() for a in row] for row in annotations],
    }
    write_json(os.path.join(out_dir, f"{name}_{args.index:06d}.json"), document, run.config_hash)
    logger.info(f"Wrote {args.sequences} sequences from '{name}' to {out_dir}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "measure": cmd_measure,
    "cluster": cmd_cluster,
    "report": cmd_report,
    "gen-data": cmd_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON, line comments allowed)")
    common.add_argument("--out", help="output root (overrides WORKBENCH_OUT and the config)")
    common.add_argument("--workers", type=int, help="grid worker threads (overrides WORKBENCH_WORKERS)")
    common.add_argument("--seed-override", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--log-dir", help="also write a timestamped log file here")

    parser = argparse.ArgumentParser(prog="workbench", description="Training-dynamics workbench for small transformers")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the model and references, writing checkpoints")
    measure = sub.add_parser("measure", parents=[common], help="run a measurement grid over checkpoints")
    measure.add_argument("--phase", required=True, choices=PHASES)
    sub.add_parser("cluster", parents=[common], help="cluster per-head trajectories")
    report = sub.add_parser("report", parents=[common], help="join all outputs into report.json")
    report.add_argument("--svg", action="store_true", help="also write SVG trajectory charts")
    gen = sub.add_parser("gen-data", parents=[common], help="materialize a batch or ingest a text corpus")
    gen.add_argument("--source", help="data source name (default: the training source)")
    gen.add_argument("--sequences", type=int, default=16)
    gen.add_argument("--index", type=int, default=0)
    gen.add_argument("--text", help="UTF-8 text to tokenize into corpus.bin")
    gen.add_argument("--vocab-size", type=int, help="tokenizer size when training one for --text")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        config = apply_overrides(config, out=args.out, workers=args.workers, log_level=args.log_level,
                                 log_dir=args.log_dir, seed=args.seed_override)
        setup_logging(config.log_level, config.log_dir)
    except ConfigError as e:
        logging.basicConfig(format='%(asctime)s - %(levelname)s - %(message)s')
        logger.error(f"Configuration error: {e}")
        return 2
    try:
        return COMMANDS[args.command](config, args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except (FileNotFoundError, TrajectoryParseError, ValueError, RuntimeError) as e:
        logger.error(f"{args.command} failed: {e}")
        if logger.isEnabledFor(logging.DEBUG):
            import traceback
            logger.debug(traceback.format_exc())
        return 1


if __name__ == "__main__":
    sys.exit(main())
