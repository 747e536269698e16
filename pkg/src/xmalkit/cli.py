"""Command-line entry point.

Every command writes its artifacts plus a ``manifest.json`` into ``--out-dir``.
The manifest records the resolved options, so ``xmalkit rerun`` can replay a
run and compare output hashes.

Exit codes: 0 success, 2 input error, 3 version or dictionary mismatch,
4 runtime failure.
"""
from __future__ import annotations

import functools
import hashlib
import io
import json
from dataclasses import asdict, fields
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import click
import numpy as np

from .baselines import (LinearSvmModel, SurrogateConfig, SvmConfig, compare_explainers,
                        default_explainers, train_svm)
from .dataset import (FeatureDictionary, ParseError, SplitSpec, as_matrix, bundled_dictionary,
                      labels_of, load_dictionary, load_samples, serialize_samples, split)
from .evaluation import (bundled_synonyms, detection_metrics, dump_synonyms, dump_truth, load_synonyms,
                         load_truth, score_sample, sweep_n)
from .interpreter import (OrderingConfigError, SemanticDatabase, bundled_semantics, dump_ordering,
                          dump_semantics, explain, load_ordering, load_semantics)
from .model import (DEFAULT_TOP_N, DictionaryMismatch, ModelFormatError, ModelVersionError, TrainingError,
                    key_features, load_model, save_model, train)
from .nn import ContractError, TrainConfig
from .synthetic import planted_family_corpus

EXIT_INPUT = 2
EXIT_MISMATCH = 3
EXIT_RUNTIME = 4

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1

# Share of dictionary features the bundled semantic database describes; used
# as the default semantic coverage of generated corpora.
DEFAULT_SEMANTIC_FRACTION = 0.17


class InputError(ValueError):
    pass


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    raise click.exceptions.Exit(code)


def guarded(fn):
    """Map library exceptions onto the exit-code contract."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except (DictionaryMismatch, ModelVersionError) as exc:
            _fail(EXIT_MISMATCH, str(exc))
        except TrainingError as exc:
            _fail(EXIT_RUNTIME, str(exc))
        except ParseError as exc:
            _fail(EXIT_INPUT, str(exc))
        except (InputError, ContractError, OrderingConfigError, ModelFormatError,
                FileNotFoundError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            _fail(EXIT_INPUT, str(exc))
        except Exception as exc:  # anything else is a runtime failure
            _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    return wrapper


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Run:
    """Collects outputs of one command and writes its manifest."""

    def __init__(self, command: str, params: dict, out_dir: str, seed: int | None = None):
        self.command = command
        self.params = params
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.dictionary_hash: str | None = None
        self.notes: list[str] = []
        self.outputs: dict[str, dict] = {}
        self.inputs = {Path(v).resolve() for k, v in params.items()
                       if k in _PATH_PARAMS and v is not None}
        self.started = _now()
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, data: str | bytes) -> Path:
        path = self.out_dir / name
        if path.resolve() in self.inputs:
            raise InputError(f"refusing to overwrite input file {path}")
        raw = data.encode("utf-8") if isinstance(data, str) else data
        path.write_bytes(raw)
        self.outputs[name] = {"path": name, "sha256": _sha256(raw)}
        return path

    def finish(self) -> dict:
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": self.command,
            "config": self.params,
            "dictionary_hash": self.dictionary_hash,
            "seed": self.seed,
            "started": self.started,
            "finished": _now(),
            "outputs": self.outputs,
            "notes": self.notes,
        }
        (self.out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


_PATH_PARAMS = {"dict_path", "data", "model", "semantics", "ordering", "truth", "synonyms",
                "svm_model", "surrogate_config", "families"}


def _params(ctx: click.Context) -> dict:
    out = {}
    for k, v in ctx.params.items():
        if k in _PATH_PARAMS and v is not None:
            v = str(Path(v).resolve())
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def _dictionary(path: str | None) -> FeatureDictionary:
    if path is None:
        return bundled_dictionary()
    with open(path, "r", encoding="utf-8") as f:
        return load_dictionary(f)


def _samples(path: str, dictionary: FeatureDictionary, require_labels: bool):
    with open(path, "r", encoding="utf-8") as f:
        return load_samples(f, dictionary, require_labels=require_labels)


def _model(path: str, dict_path: str | None):
    with open(path, "rb") as f:
        return load_model(f, _dictionary(dict_path) if dict_path else None)


def _semantic_db(semantics: str | None, ordering: str | None, dictionary: FeatureDictionary) -> SemanticDatabase:
    if semantics is None and ordering is None:
        db = bundled_semantics()
    else:
        src = (open(semantics, "r", encoding="utf-8") if semantics
               else resources.files("xmalkit.data").joinpath("semantics.csv").open("r", encoding="utf-8"))
        with src:
            if ordering:
                with open(ordering, "r", encoding="utf-8") as o:
                    db = load_semantics(src, o)
            else:
                db = load_semantics(src)
    unknown = sorted(set(db.entries) - set(dictionary.names))
    if unknown:
        raise DictionaryMismatch(f"semantic database names {len(unknown)} features absent from the model "
                                 f"dictionary (first: {unknown[0]!r}); it was built for another dictionary")
    return db


def _synonyms(path: str | None) -> dict[str, str]:
    if path is None:
        return bundled_synonyms()
    with open(path, "r", encoding="utf-8") as f:
        return load_synonyms(f)


def _truths(path: str, synonyms):
    with open(path, "r", encoding="utf-8") as f:
        return load_truth(f, synonyms)


def _record_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _emit(run: Run, name: str, text: str, quiet: bool = False):
    run.write(name, text)
    if not quiet:
        click.echo(text, nl=False)


# --- shared options -----------------------------------------------------------

def dict_option(f):
    return click.option("--dict", "dict_path", type=click.Path(exists=True, dir_okay=False),
                        help="Feature dictionary CSV (default: bundled).")(f)


def data_option(f):
    return click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True,
                        help="Sample file (id,label,features).")(f)


def model_option(f):
    return click.option("--model", type=click.Path(exists=True, dir_okay=False), required=True,
                        help="Trained attention model file.")(f)


def seed_option(f):
    return click.option("--seed", type=click.IntRange(min=0), envvar="XMALKIT_SEED", default=0,
                        show_default=True, help="Random seed (env: XMALKIT_SEED).")(f)


def out_option(f):
    return click.option("--out-dir", type=click.Path(file_okay=False), default="xmalkit-out",
                        show_default=True, help="Directory receiving every output.")(f)


def format_option(f):
    return click.option("--format", "fmt", type=click.Choice(["human", "records"]), default="human",
                        show_default=True, help="Tabular text or one JSON record per line.")(f)


def semantics_options(f):
    f = click.option("--semantics", type=click.Path(exists=True, dir_okay=False),
                     help="Semantic database CSV (default: bundled).")(f)
    f = click.option("--ordering", type=click.Path(exists=True, dir_okay=False),
                     help="Ordering rules file.")(f)
    return f


def synonyms_option(f):
    return click.option("--synonyms", type=click.Path(exists=True, dir_okay=False),
                        help="Concept synonym table (default: bundled).")(f)


def top_n_option(f):
    return click.option("--top-n", type=click.IntRange(min=1), default=DEFAULT_TOP_N, show_default=True,
                        help="Number of key features per sample.")(f)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Attention-based malware classification with behaviour descriptions."""


# --- commands -----------------------------------------------------------------

@main.command("train")
@dict_option
@data_option
@seed_option
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--batch-size", type=int, default=20, show_default=True)
@click.option("--lr", type=float, default=0.001, show_default=True)
@click.option("--optimizer", type=click.Choice(["adam", "sgd"]), default="adam", show_default=True)
@click.option("--hidden", type=str, default="64,16", show_default=True, help="Hidden layer widths.")
@click.option("--activation", type=click.Choice(["relu", "tanh"]), default="relu", show_default=True)
@click.option("--holdout", type=click.FloatRange(0.0, 1.0, max_open=True), default=0.0, show_default=True,
              help="Stratified test fraction held out and scored after training.")
@out_option
@click.pass_context
@guarded
def cmd_train(ctx, dict_path, data, seed, epochs, batch_size, lr, optimizer, hidden, activation, holdout, out_dir):
    """Train the attention classifier."""
    run = Run("train", _params(ctx), out_dir, seed)
    dictionary = _dictionary(dict_path)
    run.dictionary_hash = dictionary.hash
    samples = _samples(data, dictionary, require_labels=True)
    try:
        widths = tuple(int(w) for w in hidden.split(",") if w.strip())
    except ValueError:
        raise InputError(f"--hidden expects comma-separated integers, got {hidden!r}")
    config = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=batch_size, optimizer=optimizer, seed=seed)
    train_set, test_set = samples, []
    if holdout > 0:
        train_set, test_set = split(samples, SplitSpec(1.0 - holdout, seed, stratified=True))
        run.write("train.csv", serialize_samples(train_set, dictionary))
        run.write("test.csv", serialize_samples(test_set, dictionary))
    model = train(train_set, dictionary, config, hidden=widths, activation=activation)
    buf = io.BytesIO()
    save_model(model, buf)
    run.write("model.xmal", buf.getvalue())
    run.write("loss.csv", "epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(model.loss_trace)))
    click.echo(f"trained on {len(train_set)} samples; final loss {model.loss_trace[-1]:.6f}")
    if test_set:
        pred = (model.predict_proba(as_matrix(test_set)) > 0.5).astype(int)
        report = detection_metrics(pred, labels_of(test_set))
        run.write("metrics.json", json.dumps(asdict(report), indent=2, sort_keys=True) + "\n")
        click.echo(f"held-out accuracy {report.accuracy:.4f} on {len(test_set)} samples")
    run.finish()


@main.command("train-svm")
@dict_option
@data_option
@seed_option
@click.option("--lambda", "regularization", type=float, default=1e-3, show_default=True)
@click.option("--epochs", type=int, default=20, show_default=True)
@click.option("--batch-size", type=int, default=20, show_default=True)
@out_option
@click.pass_context
@guarded
def cmd_train_svm(ctx, dict_path, data, seed, regularization, epochs, batch_size, out_dir):
    """Train the global linear-SVM baseline."""
    run = Run("train-svm", _params(ctx), out_dir, seed)
    dictionary = _dictionary(dict_path)
    run.dictionary_hash = dictionary.hash
    samples = _samples(data, dictionary, require_labels=True)
    svm = train_svm(samples, dictionary, SvmConfig(regularization, epochs, batch_size, seed))
    run.write("svm.json", svm.dump() + "\n")
    click.echo(f"trained linear SVM on {len(samples)} samples; |w| = {np.linalg.norm(svm.weights):.4f}")
    run.finish()


@main.command("predict")
@dict_option
@model_option
@data_option
@format_option
@out_option
@click.pass_context
@guarded
def cmd_predict(ctx, dict_path, model, data, fmt, out_dir):
    """Classify samples as benign (0) or malicious (1)."""
    run = Run("predict", _params(ctx), out_dir)
    m = _model(model, dict_path)
    run.dictionary_hash = m.dictionary.hash
    samples = _samples(data, m.dictionary, require_labels=False)
    if not samples:
        raise InputError("sample file is empty")
    proba = m.predict_proba(as_matrix(samples))
    if fmt == "records":
        text = "".join(_record_line({"sample_id": s.id, "label": int(p > 0.5), "probability": float(p)})
                       for s, p in zip(samples, proba))
        _emit(run, "predictions.jsonl", text)
    else:
        width = max(len(s.id) for s in samples)
        text = "".join(f"{s.id:<{width}}  {'malicious' if p > 0.5 else 'benign':<9}  {p:.4f}\n"
                       for s, p in zip(samples, proba))
        _emit(run, "predictions.txt", text)
    run.finish()


def _human_explanation(e) -> str:
    lines = [f"{e.sample_id}  {'malicious' if e.label else 'benign'}  p={e.probability:.4f}"]
    lines.append("  key features: " + ", ".join(f"{k.name} ({k.weight:.4f})" for k in e.key_features))
    lines.append("  semantics:    " + ("; ".join(e.semantics) or "(none)"))
    lines.append("  description:  " + (e.text or "(none)"))
    for w in e.warnings:
        lines.append("  warning:      " + w)
    return "\n".join(lines) + "\n"


@main.command("explain")
@dict_option
@model_option
@data_option
@semantics_options
@top_n_option
@format_option
@out_option
@click.pass_context
@guarded
def cmd_explain(ctx, dict_path, model, data, semantics, ordering, top_n, fmt, out_dir):
    """Key features, semantics and behaviour description per sample."""
    run = Run("explain", _params(ctx), out_dir)
    m = _model(model, dict_path)
    run.dictionary_hash = m.dictionary.hash
    db = _semantic_db(semantics, ordering, m.dictionary)
    samples = _samples(data, m.dictionary, require_labels=False)
    if not samples:
        raise InputError("sample file is empty")
    explanations = [explain(m, s, top_n, db) for s in samples]
    if fmt == "records":
        _emit(run, "explanations.jsonl", "".join(_record_line(e.record()) for e in explanations))
    else:
        _emit(run, "explanations.txt", "\n".join(_human_explanation(e) for e in explanations))
    run.finish()


@main.command("evaluate")
@dict_option
@model_option
@data_option
@click.option("--truth", type=click.Path(exists=True, dir_okay=False),
              help="Ground-truth concepts (sample_id: concept;concept).")
@semantics_options
@synonyms_option
@top_n_option
@out_option
@click.pass_context
@guarded
def cmd_evaluate(ctx, dict_path, model, data, truth, semantics, ordering, synonyms, top_n, out_dir):
    """Detection metrics on labelled samples and mean ir against ground truth."""
    run = Run("evaluate", _params(ctx), out_dir)
    m = _model(model, dict_path)
    run.dictionary_hash = m.dictionary.hash
    samples = _samples(data, m.dictionary, require_labels=False)
    if not samples:
        raise InputError("sample file is empty")
    result: dict = {}
    labelled = [s for s in samples if s.label is not None]
    if labelled:
        pred = (m.predict_proba(as_matrix(labelled)) > 0.5).astype(int)
        result["detection"] = asdict(detection_metrics(pred, labels_of(labelled)))
        d = result["detection"]
        click.echo(f"accuracy {d['accuracy']:.4f}  precision {d['precision']:.4f}  "
                   f"recall {d['recall']:.4f}  F {d['f_measure']:.4f}")
    if truth:
        db = _semantic_db(semantics, ordering, m.dictionary)
        syn = _synonyms(synonyms)
        truths = _truths(truth, syn)
        rows = ["sample_id,detect,surplus,total,precision,recall,ir,description"]
        irs = []
        for s in samples:
            if s.id not in truths:
                continue
            score, desc, _ = score_sample(key_features(m, s, top_n), truths[s.id], db, syn)
            irs.append(score.ir)
            rows.append(f"{s.id},{score.detect_concepts},{score.surplus_concepts},{score.total_concepts},"
                        f"{score.precision!r},{score.recall!r},{score.ir!r},\"{desc.text}\"")
        if not irs:
            raise InputError("no sample in the data file has ground truth")
        run.write("ir.csv", "\n".join(rows) + "\n")
        result["ir"] = {"mean": float(np.mean(irs)), "samples": len(irs), "top_n": top_n}
        click.echo(f"mean ir {result['ir']['mean']:.4f} over {len(irs)} samples")
    if not result:
        raise InputError("nothing to evaluate: samples carry no labels and no --truth was given")
    run.write("metrics.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    run.finish()


@main.command("sweep")
@dict_option
@model_option
@data_option
@click.option("--truth", type=click.Path(exists=True, dir_okay=False), required=True)
@semantics_options
@synonyms_option
@click.option("--n-min", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--n-max", type=click.IntRange(min=1), default=10, show_default=True)
@out_option
@click.pass_context
@guarded
def cmd_sweep(ctx, dict_path, model, data, truth, semantics, ordering, synonyms, n_min, n_max, out_dir):
    """Mean ir for each key-feature count in a range."""
    run = Run("sweep", _params(ctx), out_dir)
    if n_max < n_min:
        raise InputError("--n-max must be >= --n-min")
    m = _model(model, dict_path)
    run.dictionary_hash = m.dictionary.hash
    db = _semantic_db(semantics, ordering, m.dictionary)
    syn = _synonyms(synonyms)
    samples = _samples(data, m.dictionary, require_labels=False)
    result = sweep_n(m, samples, _truths(truth, syn), range(n_min, n_max + 1), db, syn)
    run.write("sweep.csv", result.to_csv())
    click.echo(result.table())
    run.finish()


@main.command("compare")
@dict_option
@model_option
@click.option("--svm-model", type=click.Path(exists=True, dir_okay=False), required=True)
@data_option
@click.option("--truth", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--surrogate-config", type=click.Path(exists=True, dir_okay=False),
              help="JSON object with surrogate settings (default: built-in defaults).")
@click.option("--families", type=click.Path(exists=True, dir_okay=False),
              help="CSV of sample_id,family used to group the report.")
@semantics_options
@synonyms_option
@top_n_option
@seed_option
@out_option
@click.pass_context
@guarded
def cmd_compare(ctx, dict_path, model, svm_model, data, truth, surrogate_config, families, semantics, ordering,
                synonyms, top_n, seed, out_dir):
    """Score attention, local-surrogate and global-SVM explanations side by side."""
    run = Run("compare", _params(ctx), out_dir, seed)
    m = _model(model, dict_path)
    run.dictionary_hash = m.dictionary.hash
    with open(svm_model, "r", encoding="utf-8") as f:
        svm = LinearSvmModel.load(f, m.dictionary)
    if surrogate_config:
        raw = json.loads(_read_text(surrogate_config))
        known = {f.name for f in fields(SurrogateConfig)}
        if not isinstance(raw, dict) or set(raw) - known:
            raise InputError(f"surrogate config keys must be among {sorted(known)}")
        cfg = SurrogateConfig(**{"seed": seed, **raw})
    else:
        cfg = SurrogateConfig(seed=seed)
        run.notes.append("no surrogate config given; defaults applied: " + json.dumps(asdict(cfg), sort_keys=True))
    db = _semantic_db(semantics, ordering, m.dictionary)
    syn = _synonyms(synonyms)
    truths = _truths(truth, syn)
    samples = [s for s in _samples(data, m.dictionary, require_labels=False) if s.id in truths]
    if not samples:
        raise InputError("evaluation set is empty: no sample has ground truth")
    fam = None
    if families:
        fam = {}
        for line in _read_text(families).splitlines()[1:]:
            if line.strip():
                sid, _, name = line.partition(",")
                fam[sid.strip()] = name.strip()
    report = compare_explainers(default_explainers(m, svm, cfg), samples, truths, db, syn,
                                m.dictionary, top_n, fam)
    run.write("comparison.csv", report.rows_csv())
    run.write("summary.csv", report.summary_csv())
    run.write("frequency.csv", report.frequency_csv())
    click.echo(report.table())
    run.finish()


@main.command("generate")
@dict_option
@seed_option
@click.option("--n-samples", type=click.IntRange(min=2), default=5000, show_default=True)
@click.option("--n-families", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--concepts", "concepts_per_family", type=click.IntRange(min=1), default=3, show_default=True,
              help="Signature features (and truth concepts) per family.")
@click.option("--noise", type=click.FloatRange(0.0, 1.0), default=0.05, show_default=True)
@click.option("--semantic-fraction", type=click.FloatRange(0.0, 1.0), default=DEFAULT_SEMANTIC_FRACTION,
              show_default=True, help="Share of non-signature features that carry a semantic.")
@out_option
@click.pass_context
@guarded
def cmd_generate(ctx, dict_path, seed, n_samples, n_families, concepts_per_family, noise, semantic_fraction,
                 out_dir):
    """Write a synthetic corpus with planted families and its ground truth."""
    run = Run("generate", _params(ctx), out_dir, seed)
    dictionary = _dictionary(dict_path)
    run.dictionary_hash = dictionary.hash
    pc = planted_family_corpus(dictionary, n_samples, n_families, concepts_per_family, noise, seed,
                               semantic_fraction=semantic_fraction)
    run.write("dictionary.csv", dictionary.to_csv())
    run.write("samples.csv", serialize_samples(pc.samples, dictionary))
    run.write("truth.txt", dump_truth(pc.truths))
    run.write("semantics.csv", dump_semantics(pc.db))
    run.write("ordering.txt", dump_ordering(pc.db.ordering))
    run.write("synonyms.csv", dump_synonyms(pc.synonyms))
    run.write("families.csv", "sample_id,family\n" + "".join(f"{s.id},{pc.family[s.id]}\n" for s in pc.samples))
    sigs = "; ".join(f"{r.name}: {', '.join(r.features)}" for r in pc.rules)
    click.echo(f"wrote {len(pc.samples)} samples ({len(pc.truths)} with ground truth); {sigs}")
    run.finish()


COMMANDS = {"train": cmd_train, "train-svm": cmd_train_svm, "predict": cmd_predict, "explain": cmd_explain,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "compare": cmd_compare, "generate": cmd_generate}


@main.command("rerun")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@out_option
@click.pass_context
@guarded
def cmd_rerun(ctx, manifest, out_dir):
    """Replay a run from its manifest and compare output hashes."""
    record = json.loads(_read_text(manifest))
    if record.get("manifest_version") != MANIFEST_VERSION:
        raise ModelVersionError(f"unsupported manifest version {record.get('manifest_version')!r}")
    command = COMMANDS.get(record.get("command"))
    if command is None:
        raise InputError(f"manifest names unknown command {record.get('command')!r}")
    if Path(out_dir).resolve() == Path(manifest).resolve().parent:
        raise InputError("rerun needs an output directory other than the original run's")
    params = dict(record["config"], out_dir=out_dir)
    ctx.invoke(command, **params)
    replay = json.loads((Path(out_dir) / MANIFEST).read_text())
    mismatched = []
    for name, meta in sorted(record["outputs"].items()):
        got = replay["outputs"].get(name, {}).get("sha256")
        same = got == meta["sha256"]
        click.echo(f"{'identical' if same else 'DIFFERS  '}  {name}")
        if not same:
            mismatched.append(name)
    if mismatched:
        _fail(EXIT_RUNTIME, f"{len(mismatched)} output(s) differ from the recorded run")


if __name__ == "__main__":  # pragma: no cover
    main()
