"""
Command-line pipeline: ``ledrec <stage> --config cfg.json [--set key=value ...]``.

Each stage reads its inputs from earlier stages under the work directory,
writes its artifacts to ``<workdir>/<stage>/`` together with a
``manifest.json`` (input hashes, config echo, seed, timings), and is skipped
when a previous run already saw identical inputs and config.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

_log = logging.getLogger("ledrec.cli")

SCHEMA_VERSION = 1
OFFLINE_STAGES = ("ingest", "split", "pmi", "rsvd", "train", "index", "eval")
STAGES = OFFLINE_STAGES + ("serve", "sweep", "pipeline")

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "paths": {"data": None, "format": "ml20m", "workdir": "work"},
    "data": {
        "min_rating": 4.0,
        "min_events": 5,
        "train": 0.8,
        "validation": 0.1,
        "test": 0.1,
        "input_fraction": 0.8,
    },
    "pmi": {"alpha": 0.75, "min_count": 1, "max_pairs_per_timeline": 10_000},
    "rsvd": {"dim": 600, "oversampling": 10, "power_iterations": 2, "gamma": 0.0},
    "train": {
        "loss": "bpr",
        "negatives": 1000,
        "learning_rate": 0.001,
        "batch_size": 512,
        "max_steps": 50_000,
        "checkpoint_every": 230,
        "denoise": 0.5,
        "init": "svd",
        "tuning": "project",
        "dim": None,
        "norm_mode": "over_t",
        "click_targets": None,
        "eval_k": 100,
        "eval_max_users": None,
        "dense_eval_max_items": 50_000,
        "eval_sample_items": 10_000,
    },
    "ann": {"m": 16, "ef_construction": 200, "ef_search": 100},
    "eval": {"banner_size": 10, "normalized_recall": True, "retrieval": "dense"},
    "serve": {"host": "127.0.0.1", "port": 8080, "max_ef": 1000},
    "sweep": {"negatives": [1, 10, 100, 1000]},
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


# config


def _check_type(path: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Overlay ``override`` on ``base``; unknown fields and type mismatches raise."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = merge_config(base[key], value, where)
        else:
            out[key] = _check_type(where, base[key], value)
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=value`` to ``{"a": {"b": {"c": value}}}``; value is JSON when it parses."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        user = json.loads(Path(path).read_text())
        if user.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: unsupported version {user['schema_version']}")
        cfg = merge_config(cfg, user)
    for item in overrides:
        cfg = merge_config(cfg, parse_override(item))
    return cfg


def stage_seed(root: int, stage: str) -> int:
    digest = hashlib.sha256(f"{root}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# logging


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        rec = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            rec["exc"] = self.formatException(record.exc_info)
        return json.dumps(rec)


def setup_logging(level: str = "info") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [h for h in root.handlers if not isinstance(h.formatter, JsonFormatter)]
    root.addHandler(handler)
    root.setLevel(level.upper())


# stages


class Pipeline:
    """Runs stages against one config; see module docstring for the layout."""

    def __init__(self, cfg: dict, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.workdir = Path(cfg["paths"]["workdir"])

    def out(self, stage: str) -> Path:
        return self.workdir / stage

    def need(self, stage: str, name: str) -> Path:
        p = self.out(stage) / name
        if not p.exists():
            raise StageError(f"missing {p}; run the '{stage}' stage first")
        return p

    def _name(self, p: Path) -> str:
        try:
            return str(p.resolve().relative_to(self.workdir.resolve()))
        except ValueError:
            return str(p.resolve())

    def _config_echo(self, stage: str) -> dict:
        sections = {
            "ingest": ["paths", "data"],
            "split": ["data"],
            "pmi": ["pmi"],
            "rsvd": ["rsvd"],
            "train": ["train", "rsvd", "data"],
            "index": ["ann"],
            "eval": ["eval", "data", "train", "ann"],
            "sweep": ["train", "sweep", "data"],
        }[stage]
        echo = {s: self.cfg[s] for s in sections}
        if stage == "ingest":
            echo["paths"] = {k: v for k, v in self.cfg["paths"].items() if k != "workdir"}
        return echo

    def run(self, stage: str, inputs: list[Path], body) -> bool:
        """Run ``body(out_dir, seed)`` unless an identical earlier run is on disk."""
        out = self.out(stage)
        manifest_path = out / "manifest.json"
        seed = stage_seed(self.cfg["seed"], stage)
        hashes = {self._name(p): file_hash(p) for p in inputs}
        config = self._config_echo(stage)
        if manifest_path.exists() and not self.force:
            old = json.loads(manifest_path.read_text())
            same = old.get("inputs") == hashes and old.get("config") == config and old.get("seed") == seed
            outputs_ok = all(
                (out / name).exists() and file_hash(out / name) == h
                for name, h in old.get("outputs", {}).items()
            )
            if same and outputs_ok:
                _log.info("stage %s: inputs and config unchanged, skipping", stage)
                return False
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        t0 = time.perf_counter()
        _log.info("stage %s: starting", stage)
        body(out, seed)
        elapsed = time.perf_counter() - t0
        outputs = {
            str(p.relative_to(out)): file_hash(p)
            for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"
        }
        manifest = {
            "stage": stage,
            "schema_version": SCHEMA_VERSION,
            "seed": seed,
            "inputs": hashes,
            "config": config,
            "outputs": outputs,
            "timings": {"seconds": elapsed},
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        _log.info("stage %s: done in %.2fs", stage, elapsed)
        return True

    # individual stages

    def ingest(self) -> bool:
        from .data import ingest_jsonl, ingest_ml20m, save_vocabulary

        data = self.cfg["paths"]["data"]
        if not data:
            raise ConfigError("paths.data: required for the ingest stage")
        src = Path(data)
        if not src.exists():
            raise StageError(f"input data {src} does not exist")
        fmt = self.cfg["paths"]["format"]
        if fmt not in ("ml20m", "jsonl"):
            raise ConfigError(f"paths.format: expected 'ml20m' or 'jsonl', got {fmt!r}")

        def body(out, seed):
            d = self.cfg["data"]
            ts = ingest_ml20m(src, d["min_rating"], d["min_events"]) if fmt == "ml20m" else ingest_jsonl(src)
            ts.save(out / "timelines.ledt")
            save_vocabulary(ts.vocab, out / "vocab.json")
            (out / "stats.json").write_text(json.dumps(ts.stats(), indent=2))

        return self.run("ingest", [src], body)

    def split(self) -> bool:
        from .data import SplitSpec, TimelineSet, split_users

        src = self.need("ingest", "timelines.ledt")

        def body(out, seed):
            d = self.cfg["data"]
            spec = SplitSpec(d["train"], d["validation"], d["test"], d["input_fraction"], seed)
            parts = split_users(TimelineSet.load(src), spec)
            for name, part in parts._asdict().items():
                part.save(out / f"{name}.ledt")

        return self.run("split", [src], body)

    def pmi(self) -> bool:
        from .data import TimelineSet
        from .pmi import build_pmi, count_cooccurrences

        src = self.need("split", "train.ledt")

        def body(out, seed):
            p = self.cfg["pmi"]
            stats = count_cooccurrences(
                TimelineSet.load(src), max_pairs_per_timeline=p["max_pairs_per_timeline"], seed=seed
            )
            build_pmi(stats, p["alpha"], p["min_count"]).save(out / "pmi.ledp")

        return self.run("pmi", [src], body)

    def rsvd(self) -> bool:
        from .pmi import PmiMatrix
        from .rsvd import RsvdConfig, randomized_svd

        src = self.need("pmi", "pmi.ledp")

        def body(out, seed):
            r = self.cfg["rsvd"]
            cfg = RsvdConfig(r["dim"], r["oversampling"], r["power_iterations"], seed, r["gamma"])
            emb, _ = randomized_svd(PmiMatrix.load(src).matrix, cfg)
            emb.save(out / "embeddings.lede")

        return self.run("rsvd", [src], body)

    def train_config(self, seed: int):
        from .trainer import TrainConfig

        t = dict(self.cfg["train"])
        dim = t.pop("dim")
        rdim = self.cfg["rsvd"]["dim"]
        if t["init"] == "svd" and dim is not None and dim != rdim:
            raise ConfigError(f"train.dim: {dim} differs from rsvd.dim {rdim}")
        valid = {f.name for f in fields(TrainConfig)}
        t = {k: v for k, v in t.items() if k in valid}
        try:
            return TrainConfig(**t, dim=dim or rdim, input_fraction=self.cfg["data"]["input_fraction"], seed=seed)
        except ValueError as e:
            raise ConfigError(f"train: {e}") from None

    def _train_inputs(self):
        from .data import TimelineSet
        from .rsvd import EmbeddingMatrix

        inputs = [self.need("split", "train.ledt"), self.need("split", "validation.ledt")]
        base = None
        if self.cfg["train"]["init"] == "svd":
            inputs.append(self.need("rsvd", "embeddings.lede"))
        return inputs, lambda: (
            TimelineSet.load(inputs[0]),
            TimelineSet.load(inputs[1]),
            EmbeddingMatrix.load(inputs[2]) if len(inputs) > 2 else base,
        )

    def train(self) -> bool:
        from .model import parameter_count
        from .trainer import train

        inputs, load = self._train_inputs()

        def body(out, seed):
            cfg = self.train_config(seed)
            tr, va, base = load()
            res = train(tr, va, base, cfg, checkpoint_dir=out / "checkpoints", log_path=out / "train_log.jsonl")
            res.model.save(out / "model.ledm")
            summary = {
                "best_step": res.best.step,
                "best_ndcg": res.best.ndcg,
                "checkpoints": [{"step": c.step, "ndcg": c.ndcg} for c in res.checkpoints],
                "skipped": res.skipped,
                "parameters": parameter_count(res.model),
            }
            (out / "summary.json").write_text(json.dumps(summary, indent=2))

        return self.run("train", inputs, body)

    def index(self) -> bool:
        from .ann import build_index
        from .data import load_vocabulary
        from .model import LedModel, augment_for_mips
        from .service import INDEX_FILE, MODEL_FILE, VOCAB_FILE, make_state

        model_path = self.need("train", "model.ledm")
        vocab_path = self.need("ingest", "vocab.json")

        def body(out, seed):
            a = self.cfg["ann"]
            model = LedModel.load(model_path)
            items, _ = augment_for_mips(model)
            idx = build_index(items, a["m"], a["ef_construction"], seed, a["ef_search"])
            vocab = load_vocabulary(vocab_path)
            make_state(model, idx, vocab, "check")  # refuse to write an unservable bundle
            idx.save(out / INDEX_FILE)
            shutil.copyfile(model_path, out / MODEL_FILE)
            shutil.copyfile(vocab_path, out / VOCAB_FILE)

        return self.run("index", [model_path, vocab_path], body)

    def _click_targets(self, ts) -> bool:
        from .data import has_clicks

        c = self.cfg["train"]["click_targets"]
        return has_clicks(ts) if c is None else bool(c)

    def eval(self) -> bool:
        from .ann import AnnIndex
        from .data import TimelineSet, holdout_splits, load_vocabulary
        from .evaluation import evaluate, evaluate_popularity
        from .model import LedModel

        e = self.cfg["eval"]
        if e["retrieval"] not in ("dense", "brute", "ann"):
            raise ConfigError(f"eval.retrieval: expected dense|brute|ann, got {e['retrieval']!r}")
        inputs = [
            self.need("train", "model.ledm"),
            self.need("split", "test.ledt"),
            self.need("ingest", "vocab.json"),
        ]
        if e["retrieval"] == "ann":
            inputs.append(self.need("index", "index.ledi"))

        def body(out, seed):
            model = LedModel.load(inputs[0])
            test = TimelineSet.load(inputs[1])
            vocab = load_vocabulary(inputs[2])
            click = self._click_targets(test)
            _, splits, skipped = holdout_splits(test, self.cfg["data"]["input_fraction"], seed, click)
            if not splits:
                raise StageError("no evaluable test users")
            index = AnnIndex.load(inputs[3]) if len(inputs) > 3 else None
            kw = dict(banner_size=e["banner_size"], exclude_input=not click,
                      normalized=e["normalized_recall"], seed=seed)
            rep = evaluate(model, splits, e["retrieval"], index, self.cfg["ann"]["ef_search"], **kw)
            rep.write_json(out / "report.json")
            rep.write_csv(out / "report.csv")
            gbo = evaluate_popularity(vocab, splits, **kw)
            gbo.write_json(out / "gbo.json")
            _log.info("test recall@20 %.4f recall@50 %.4f ndcg@100 %.4f (gbo recall@50 %.4f)",
                      rep.recall_20, rep.recall_50, rep.ndcg_100, gbo.recall_50)
            if skipped:
                _log.info("test users skipped: %s", skipped)

        return self.run("eval", inputs, body)

    def sweep(self) -> bool:
        from .data import TimelineSet
        from .evaluation import sweep_negatives, write_sweep_csv

        inputs, load = self._train_inputs()
        inputs = inputs + [self.need("split", "test.ledt")]

        def body(out, seed):
            cfg = self.train_config(seed)
            tr, va, base = load()
            test = TimelineSet.load(inputs[-1])
            rows, ref = sweep_negatives(cfg, self.cfg["sweep"]["negatives"], (tr, va, test), base, seed)
            write_sweep_csv(rows, out / "sweep.csv")
            ref.write_json(out / "multinomial.json")

        return self.run("sweep", inputs, body)

    def serve(self) -> None:
        from .service import serve

        s = self.cfg["serve"]
        state_dir = self.out("index")
        self.need("index", "index.ledi")
        serve(state_dir, s["host"], s["port"], s["max_ef"])

    def pipeline(self) -> None:
        for stage in OFFLINE_STAGES:
            getattr(self, stage)()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ledrec", description="LED recommender pipeline")
    ap.add_argument("stage", choices=STAGES)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config field by dotted path (repeatable)")
    ap.add_argument("--force", action="store_true", help="rerun stages even if unchanged")
    ap.add_argument("--log-level", default="info")
    ap.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.print_config:
            print(json.dumps(cfg, indent=2))
            return 0
        getattr(Pipeline(cfg, args.force), args.stage)()
    except (ConfigError, StageError) as e:
        _log.error("%s", e)
        return 2
    except Exception as e:  # noqa: BLE001
        _log.exception("stage %s failed: %s", args.stage, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
