"""Command-line entry point and experiment orchestration.

Every subcommand accepts ``--config FILE`` (JSON whose keys mirror the long
flags, with dashes or underscores), ``--seed`` and ``--out``. Flags given on
the command line win over the config file. Outputs carry the config digest
and seed, and contain no timestamps, so re-runs are byte-identical.

Exit codes: 0 success, 2 usage, 3 config, 4 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attacks as atk
from . import data as dt
from . import metrics as mt
from . import pinned
from . import training as tr
from .models import CheckpointError, MiniEmbedder, MiniStyleGen, generate, load_checkpoint

log = logging.getLogger("rfidlab")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
DEFAULT_N = 4096
DEFAULT_ALPHAS = (0.7, 0.9, 1.0)
DEFAULT_SIGMA_NOISE = (0.1, 0.2, 0.3, 0.4)
DEFAULT_SIGMA_BLUR = (1.0, 2.0, 3.0, 4.0)


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


# -- configuration --------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


_FILE_KEYS = ("embedder", "generator", "a", "b")
_NAMED_SOURCES = ("eval-a", "eval-b", "train", "eval", "noise")


def _file_identity(ref):
    """Content hash for a file reference so the digest does not depend on where it lives."""
    if not isinstance(ref, str) or ref in _NAMED_SOURCES or ref.startswith("gen:"):
        return ref
    path = pinned.path(ref[len("pinned:"):]) if ref.startswith("pinned:") else Path(ref)
    try:
        return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    except (OSError, KeyError, ValueError):
        return ref


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def _line_of(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), 1):
        if f'"{key}"' in line:
            return i
    return 0


def load_config(path: str, known: dict) -> dict:
    """Parse a JSON config, checking keys and value types against ``known``.

    ``known`` maps option names to argparse actions. Errors name the file,
    line and field.
    """
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}:1: top level must be a JSON object")
    out = {}
    for key, value in raw.items():
        name = key.replace("-", "_")
        where = f"{path}:{_line_of(text, key)}: field '{key}'"
        if name not in known:
            raise ConfigError(f"{where}: unknown field")
        action = known[name]
        try:
            if action.nargs in ("*", "+"):
                if not isinstance(value, list):
                    raise TypeError("expected a list")
                value = [action.type(v) if action.type else v for v in value]
            elif isinstance(action, argparse._StoreTrueAction):
                if not isinstance(value, bool):
                    raise TypeError("expected true or false")
            elif action.type is not None:
                if isinstance(value, (list, dict)) or (isinstance(value, bool)
                                                       and action.type is not bool):
                    raise TypeError(f"expected {action.type.__name__}")
                value = action.type(value)
            if action.choices is not None and value not in action.choices:
                raise ValueError(f"must be one of {sorted(action.choices)}")
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from None
        out[name] = value
    return out


def _float_list(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


# -- sweep reports --------------------------------------------------------------------

@dataclass
class SweepReport:
    """Rows of sweep parameters and metric values; every row carries digest and seed."""

    kind: str
    columns: list
    rows: list = field(default_factory=list)
    config_digest: str = ""
    seed: int = 0

    def add(self, **row) -> None:
        row.setdefault("config_digest", self.config_digest)
        row.setdefault("seed", self.seed)
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"row lacks columns {sorted(missing)}")
        self.rows.append({c: row[c] for c in self.columns})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.columns])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"kind": self.kind, "columns": self.columns, "rows": self.rows,
               "config_digest": self.config_digest, "seed": self.seed}
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, out: Path, stem: str) -> list[Path]:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.csv", out / f"{stem}.json"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.to_json())
        return paths

    @classmethod
    def from_file(cls, path: Path) -> "SweepReport":
        path = Path(path)
        try:
            if path.suffix == ".json":
                doc = json.loads(path.read_text())
                rep = cls(doc["kind"], list(doc["columns"]), [], doc.get("config_digest", ""),
                          doc.get("seed", 0))
                rep.rows = [dict(r) for r in doc["rows"]]
                return rep
            with path.open(newline="") as f:
                rows = list(csv.DictReader(f))
            with path.open(newline="") as f:
                columns = next(csv.reader(f))
        except (OSError, ValueError, KeyError, StopIteration) as e:
            raise ConfigError(f"{path}: not a sweep report ({e})") from None
        if "config_digest" not in columns:
            raise ConfigError(f"{path}: not a sweep report (no config_digest column)")
        digests = {r["config_digest"] for r in rows}
        return cls(path.stem, columns, rows, digests.pop() if len(digests) == 1 else "",
                   int(rows[0]["seed"]) if rows else 0)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


# -- resources --------------------------------------------------------------------------

def _load(path: str, kind):
    if path.startswith("pinned:"):
        path = str(pinned.path(path[len("pinned:"):]))
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except CheckpointError as e:
        raise ConfigError(f"{path}: {e}") from None
    model = ckpt.build()
    if not isinstance(model, kind):
        raise ConfigError(f"{path}: expected a {kind.kind} checkpoint, got {ckpt.kind}")
    model.provenance["digest"] = ckpt.digest()[:16]
    return model


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


_EVAL_CACHE: dict = {}


def eval_split() -> dt.ImageBatch:
    if "eval" not in _EVAL_CACHE:
        _EVAL_CACHE["eval"] = dt.generate_dataset(split="eval")
    return _EVAL_CACHE["eval"]


def image_source(spec: str, n: int, seed: int, gen: Optional[MiniStyleGen] = None
                 ) -> dt.ImageBatch:
    """Resolve an image source.

    ``eval-a``/``eval-b`` are the two disjoint real halves, ``train`` and
    ``eval`` whole splits, ``noise`` uniform noise, ``gen:ALPHA`` generator
    samples; anything else is a tensor file path.
    """
    if spec in ("eval-a", "eval-b"):
        a, b = dt.eval_halves(eval_split(), n)
        return a if spec == "eval-a" else b
    if spec in ("train", "eval"):
        batch = eval_split() if spec == "eval" else dt.generate_dataset(split="train")
        return batch.subset(np.arange(min(n, len(batch))))
    if spec == "noise":
        return dt.random_noise_images(n, seed)
    if spec.startswith("gen:"):
        if gen is None:
            raise UsageError(f"source {spec!r} needs --generator")
        try:
            alpha = float(spec[4:])
        except ValueError:
            raise UsageError(f"bad truncation in source {spec!r}") from None
        return generate(gen, gen_latents(gen, n, seed), alpha)
    try:
        return dt.load_batch(spec)
    except FileNotFoundError:
        raise ConfigError(f"image source not found: {spec}") from None
    except dt.TensorFileError as e:
        raise ConfigError(f"{spec}: {e}") from None


def gen_latents(gen: MiniStyleGen, n: int, seed: int) -> np.ndarray:
    return dt.sample_latents(n, "standard-normal", seed, dim=gen.z_dim).astype(np.float32)


# -- subcommands --------------------------------------------------------------------------

def cmd_train(args, digest: str) -> int:
    _need(args, "kind")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = dt.generate_dataset(split="train")
    ev = eval_split()
    name = args.name or args.kind
    if args.kind == "generator":
        cfg = tr.GAN_PRESETS[args.preset]
        kw = {"seed": args.seed}
        if args.iterations is not None:
            kw["iterations"] = args.iterations
        cfg = tr.GanConfig(**{**cfg.to_dict(), **kw})
        emb = _load(args.embedder, MiniEmbedder) if args.embedder else None
        ckpt = tr.train_generator(train, cfg, emb)
    else:
        kappa = 0.0
        if args.kind == "robust":
            if args.kappa_preset is None and args.kappa is None:
                raise UsageError("robust training needs --kappa or --kappa-preset")
            kappa = tr.KAPPA_PRESETS[args.kappa_preset] if args.kappa_preset else args.kappa
        elif args.kappa or args.kappa_preset:
            raise UsageError("--kappa only applies to --kind robust")
        base = tr.PRESETS[args.preset].to_dict()
        base.update(kappa=kappa, seed=args.seed)
        if args.epochs is not None:
            base["epochs"] = args.epochs
        cfg = tr.TrainConfig(**base)
        fn = tr.train_adversarial if kappa > 0 else tr.train_nominal
        ckpt = fn(train, cfg, eval_data=ev)
    ckpt.provenance["config_digest"] = digest
    path = out / f"{name}.ckpt"
    path.write_bytes(ckpt.to_bytes())
    logdoc = {"name": name, "checkpoint": path.name, "digest": ckpt.digest(),
              "config_digest": digest, "seed": args.seed, "provenance": ckpt.provenance}
    (out / f"{name}.log.json").write_text(json.dumps(logdoc, sort_keys=True, indent=1) + "\n")
    print(json.dumps({"checkpoint": str(path), "digest": ckpt.digest()}, sort_keys=True))
    return EXIT_OK


def cmd_metric(args, digest: str) -> int:
    _need(args, "embedder", "a")
    emb = _load(args.embedder, MiniEmbedder)
    gen = _load(args.generator, MiniStyleGen) if args.generator else None
    a = image_source(args.a, args.n, args.seed, gen)
    if args.metric == "is":
        rep = mt.inception_score(emb, a, args.splits, digest, args.seed)
    else:
        _need(args, "b")
        b = image_source(args.b, args.n, args.seed + 1, gen)
        rep = mt.fid(emb, a, b, digest, args.seed)
    line = rep.to_json()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.name or 'metric'}.jsonl").write_text(line + "\n")
    print(line)
    return EXIT_OK


ATTACK_COLUMNS = ["kind", "param", "value", "metric", "before", "after", "increase",
                  "linf", "l2", "w1", "steps", "config_digest", "seed"]


def run_attack_sweep(args, digest: str) -> SweepReport:
    emb = _load(args.embedder, MiniEmbedder)
    gen = _load(args.generator, MiniStyleGen) if args.generator else None
    kind = args.kind
    rep = SweepReport(f"attack-{kind}", ATTACK_COLUMNS, config_digest=digest, seed=args.seed)
    a, b = dt.eval_halves(eval_split(), DEFAULT_N)
    real = b.subset(np.arange(min(args.n, len(b))))
    base = {"seed": args.seed, "steps": args.steps, "step_size": args.step_size,
            "init": args.init}
    if kind in atk.BOUNDED:
        grid = [("eps", e) for e in (args.eps or list(atk.EPS_PRESETS.values()))]
    elif kind in atk.LATENT:
        grid = [("alpha", al) for al in (args.alpha or [1.0])]
    else:
        grid = [("none", 0.0)]
    for param, value in grid:
        kw = dict(base, eps=value if param == "eps" else None)
        spec = atk.AttackSpec(kind, **{k: v for k, v in kw.items() if v is not None})
        res = atk.run_attack(spec, emb, real, gen, alpha=value if param == "alpha" else 1.0,
                             n=args.n, reference=a if kind == "max-fid" else None,
                             config_digest=digest)
        rep.add(kind=kind, param=param, value=value, metric=res.after.metric,
                before=res.before.value, after=res.after.value, increase=res.increase,
                steps=res.steps_run if kind not in atk.BOUNDED else spec.steps,
                **res.magnitude)
        if args.save_payloads:
            res.save(Path(args.out) / f"attack-{kind}-{param}{value}")
        log.info("%s %s=%s: %s %.4f -> %.4f", kind, param, value, res.after.metric,
                 res.before.value, res.after.value)
    return rep


def cmd_attack(args, digest: str) -> int:
    _need(args, "kind", "embedder")
    if args.kind in atk.LATENT:
        _need(args, "generator")
    rep = run_attack_sweep(args, digest)
    rep.write(Path(args.out), args.name or f"attack-{args.kind}")
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


STUDY_COLUMNS = ["family", "a", "b", "metric", "value", "config_digest", "seed"]


def truncation_study(emb: MiniEmbedder, gen: MiniStyleGen, alphas, n: int, seed: int,
                     digest: str = "") -> SweepReport:
    """FID of each truncation level against real data and against each other.

    All truncation levels share one latent draw, so ``(alpha, alpha)`` compares
    a sample set with itself; the real-vs-real row compares the two disjoint
    real halves.
    """
    alphas = sorted(alphas)
    rep = SweepReport("truncation-study", STUDY_COLUMNS, config_digest=digest, seed=seed)
    real_a, real_b = dt.eval_halves(eval_split(), n)
    z = gen_latents(gen, n, seed)
    emb_of = {al: mt.estimate_stats(mt.embed(emb, generate(gen, z, al))) for al in alphas}
    real_stats = mt.estimate_stats(mt.embed(emb, real_a))
    name = "R-FID" if float(emb.provenance.get("kappa", 0)) > 0 else "FID"
    for al in alphas:
        rep.add(family="gen-vs-real", a=al, b="real", metric=name,
                value=mt.frechet_distance(emb_of[al], real_stats))
    for i, ai in enumerate(alphas):
        for aj in alphas[i:]:
            rep.add(family="gen-vs-gen", a=ai, b=aj, metric=name,
                    value=mt.frechet_distance(emb_of[ai], emb_of[aj]))
    rep.add(family="real-vs-real", a="eval-a", b="eval-b", metric=name,
            value=mt.frechet_distance(real_stats, mt.estimate_stats(mt.embed(emb, real_b))))
    return rep


def degradation_study(emb: MiniEmbedder, sigma_noise, sigma_blur, n: int, seed: int,
                      digest: str = "") -> SweepReport:
    """FID between clean real images and noisy or blurred copies of them."""
    rep = SweepReport("degradation-study", STUDY_COLUMNS, config_digest=digest, seed=seed)
    clean, _ = dt.eval_halves(eval_split(), n)
    ref = mt.estimate_stats(mt.embed(emb, clean))
    name = "R-FID" if float(emb.provenance.get("kappa", 0)) > 0 else "FID"
    for fam, sigmas, fn in (("noise", sigma_noise, lambda s: dt.gaussian_noise(clean, s, seed)),
                            ("blur", sigma_blur, lambda s: dt.gaussian_blur(clean, s))):
        for s in sorted(sigmas):
            deg = clean if s == 0 else fn(s)
            rep.add(family=fam, a=s, b="clean", metric=name,
                    value=mt.frechet_distance(ref, mt.estimate_stats(mt.embed(emb, deg))))
    return rep


def cmd_truncation_study(args, digest: str) -> int:
    _need(args, "embedder", "generator")
    rep = truncation_study(_load(args.embedder, MiniEmbedder),
                           _load(args.generator, MiniStyleGen),
                           args.alpha or DEFAULT_ALPHAS, args.n, args.seed, digest)
    rep.write(Path(args.out), args.name or "truncation-study")
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


def cmd_degradation_study(args, digest: str) -> int:
    _need(args, "embedder")
    rep = degradation_study(_load(args.embedder, MiniEmbedder),
                            args.sigma_noise or DEFAULT_SIGMA_NOISE,
                            args.sigma_blur or DEFAULT_SIGMA_BLUR, args.n, args.seed, digest)
    rep.write(Path(args.out), args.name or "degradation-study")
    sys.stdout.write(rep.to_csv())
    return EXIT_OK


def merge_reports(reports: list[SweepReport]) -> tuple[str, str]:
    """Plain-text summary and merged CSV of several sweep reports."""
    if not reports:
        raise UsageError("report needs at least one input")
    columns = reports[0].columns
    for r in reports[1:]:
        if r.columns != columns:
            raise ConfigError(f"schema mismatch: {r.kind} has columns {r.columns}, "
                              f"expected {columns}")
    digests = sorted({str(row["config_digest"]) for r in reports for row in r.rows})
    header = [f"reports: {', '.join(r.kind for r in reports)}",
              f"config digests: {', '.join(digests) or '-'}"]
    if len(digests) > 1:
        header.append("WARNING: conflicting config digests")
    merged = SweepReport("report", ["source"] + columns)
    for r in reports:
        for row in r.rows:
            merged.rows.append({"source": r.kind, **row})
    widths = {c: max(len(c), *(len(_fmt(row[c])) for row in merged.rows)) if merged.rows
              else len(c) for c in merged.columns}
    lines = header + ["", "  ".join(c.ljust(widths[c]) for c in merged.columns)]
    lines += ["  ".join(_fmt(row[c]).ljust(widths[c]) for c in merged.columns).rstrip()
              for row in merged.rows]
    return "\n".join(lines) + "\n", merged.to_csv()


def cmd_report(args, digest: str) -> int:
    if not args.inputs:
        raise UsageError("report needs at least one input file")
    text, merged = merge_reports([SweepReport.from_file(Path(p)) for p in args.inputs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.name or 'report'}.txt").write_text(text)
    (out / f"{args.name or 'report'}.csv").write_text(merged)
    sys.stdout.write(text)
    return EXIT_OK


PIPELINE_MODELS = ("nominal", "robust-k64", "robust-k128", "generator")


def cmd_pipeline(args, digest: str) -> int:
    """Train every model, then run all studies and attack sweeps into ``--out``."""
    out = Path(args.out)
    ck = out / "checkpoints"
    timings = {}

    def step(name, argv):
        t0 = time.perf_counter()
        code = main(argv + ["--seed", str(args.seed)], _nested=True)
        timings[name] = time.perf_counter() - t0
        if code != EXIT_OK:
            raise RuntimeError(f"pipeline step {name} failed with exit code {code}")

    if args.use_pinned:
        paths = {m: f"pinned:{m}" for m in PIPELINE_MODELS}
    else:
        paths = {m: str(ck / f"{m}.ckpt") for m in PIPELINE_MODELS}
        p = ["--preset", args.preset, "--out", str(ck)]
        step("train-nominal", ["train", "--kind", "nominal", "--name", "nominal"] + p)
        for k in ("k64", "k128"):
            step(f"train-robust-{k}", ["train", "--kind", "robust", "--kappa-preset", k,
                                       "--name", f"robust-{k}"] + p)
        step("train-generator", ["train", "--kind", "generator", "--name", "generator",
                                 "--embedder", paths["nominal"]] + p)
    n = str(args.n)
    na = str(args.attack_n)
    rd = str(out / "reports")
    for emb in ("nominal", "robust-k128"):
        step(f"attack-max-fid-{emb}", ["attack", "--kind", "max-fid", "--embedder", paths[emb],
                                       "--n", na, "--out", rd, "--name", f"max-fid-{emb}"])
    step("attack-latent-z", ["attack", "--kind", "latent-z", "--embedder", paths["nominal"],
                             "--generator", paths["generator"], "--alpha", "0.7,1.0",
                             "--n", na, "--out", rd, "--name", "latent-z"])
    step("attack-latent-w", ["attack", "--kind", "latent-w", "--embedder", paths["nominal"],
                             "--generator", paths["generator"], "--n", na, "--out", rd,
                             "--name", "latent-w"])
    step("truncation-study", ["truncation-study", "--embedder", paths["robust-k128"],
                              "--generator", paths["generator"], "--n", n, "--out", rd])
    step("degradation-study", ["degradation-study", "--embedder", paths["robust-k128"],
                               "--n", n, "--out", rd])
    # attack sweeps and studies have different columns, so they merge separately
    studies = [str(Path(rd) / f"{s}.csv") for s in ("truncation-study", "degradation-study")]
    attacks = sorted(str(p) for p in Path(rd).glob("*.csv") if str(p) not in studies)
    step("report", ["report", *attacks, "--out", str(out)])
    step("report-studies", ["report", *studies, "--out", str(out), "--name", "studies"])
    # wall-clock timings vary run to run, so they are logged rather than written
    for k, v in timings.items():
        log.info("%-28s %8.1f s", k, v)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfidlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory (default: .)")
        sp.add_argument("--name", help="output file stem")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    t = common(sub.add_parser("train", help="train an embedder or the generator"))
    t.add_argument("--kind", choices=("nominal", "robust", "generator"))
    t.add_argument("--preset", choices=sorted(tr.PRESETS))
    t.add_argument("--kappa", type=float)
    t.add_argument("--kappa-preset", choices=sorted(tr.KAPPA_PRESETS))
    t.add_argument("--epochs", type=int)
    t.add_argument("--iterations", type=int, help="generator training iterations")
    t.add_argument("--embedder", help="embedder used to record generator FID")

    m = common(sub.add_parser("metric", help="compute FID or IS"))
    m.add_argument("--metric", choices=("fid", "is"))
    m.add_argument("--embedder")
    m.add_argument("--generator")
    m.add_argument("--a", help="image source (path, eval-a, eval-b, train, noise, gen:ALPHA)")
    m.add_argument("--b", help="second image source for FID")
    m.add_argument("--n", type=int)
    m.add_argument("--splits", type=int)

    a = common(sub.add_parser("attack", help="run an attack sweep"))
    a.add_argument("--kind", choices=atk.KINDS)
    a.add_argument("--embedder")
    a.add_argument("--generator")
    a.add_argument("--eps", type=_float_list, help="comma-separated L-inf budgets")
    a.add_argument("--alpha", type=_float_list, help="comma-separated truncation levels")
    a.add_argument("--n", type=int)
    a.add_argument("--steps", type=int)
    a.add_argument("--step-size", type=float)
    a.add_argument("--init", choices=atk.INITS)
    a.add_argument("--save-payloads", action="store_true")

    ts = common(sub.add_parser("truncation-study", help="FID across truncation levels"))
    ts.add_argument("--embedder")
    ts.add_argument("--generator")
    ts.add_argument("--alpha", type=_float_list)
    ts.add_argument("--n", type=int)

    ds = common(sub.add_parser("degradation-study", help="FID under noise and blur"))
    ds.add_argument("--embedder")
    ds.add_argument("--sigma-noise", type=_float_list)
    ds.add_argument("--sigma-blur", type=_float_list)
    ds.add_argument("--n", type=int)

    r = common(sub.add_parser("report", help="merge sweep reports"))
    r.add_argument("inputs", nargs="*")

    pl = common(sub.add_parser("pipeline", help="train all models and run every study"))
    pl.add_argument("--preset", choices=sorted(tr.PRESETS))
    pl.add_argument("--n", type=int)
    pl.add_argument("--attack-n", type=int)
    pl.add_argument("--use-pinned", action="store_true", help="skip training")
    return p


DEFAULTS = {
    "seed": 0, "out": ".", "preset": "desk", "metric": "fid", "splits": 10,
    "n": DEFAULT_N, "attack_n": 512,
}
_HANDLERS = {
    "train": cmd_train, "metric": cmd_metric, "attack": cmd_attack,
    "truncation-study": cmd_truncation_study, "degradation-study": cmd_degradation_study,
    "report": cmd_report, "pipeline": cmd_pipeline,
}
_NOT_CONFIG = {"config", "verbose", "command"}


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def resolve(args, parser) -> tuple[argparse.Namespace, dict]:
    """Merge config file, flags and defaults; returns args and the canonical config."""
    sp = _subparser(parser, args.command)
    known = {a.dest: a for a in sp._actions if a.dest not in _NOT_CONFIG | {"help"}}
    from_file = load_config(args.config, known) if args.config else {}
    for k, v in from_file.items():
        if getattr(args, k) in (None, [], False):
            setattr(args, k, v)
    for k in known:
        if getattr(args, k, None) is None and k in DEFAULTS:
            setattr(args, k, DEFAULTS[k])
    # the output location and name do not change results, so they stay out of the digest
    cfg = {"command": args.command}
    cfg.update({k: getattr(args, k) for k in sorted(known) if k not in ("out", "name")})
    for k in _FILE_KEYS:
        if k in cfg:
            cfg[k] = _file_identity(cfg[k])
    return args, cfg


def _apply_threads() -> None:
    n = os.environ.get("RFIDLAB_THREADS")
    if not n:
        return
    try:
        k = int(n)
        if k < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"RFIDLAB_THREADS must be a positive integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=k)


def main(argv=None, _nested: bool = False) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not _nested:
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
    try:
        if not _nested:
            _apply_threads()
        args, cfg = resolve(args, parser)
        return _HANDLERS[args.command](args, config_digest(cfg))
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"rfidlab: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"rfidlab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (mt.MetricError, atk.AttackError, tr.TrainingError, ArithmeticError,
            ValueError, RuntimeError) as e:
        print(f"rfidlab: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
