"""Batch command line: ``peak2struct {analyze,synth,train,eval,compare,rollout}``.

Exit codes: 0 success, 1 runtime failure (message tagged with the failing
stage), 2 usage error.  Every output file is written to a temporary name and
renamed into place, and nothing is written when any stage fails.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
H_TAG = "_atom_site_attached_hydrogens"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


# --------------------------------------------------------------------------
# file helpers


def read_peak_input(path):
    """(structure, peak cloud) from a ``.res``/``.ins`` or a CIF carrying ``_atom_site_peak_height``."""
    from .cif_io import cif_to_peaks, parse_cif, parse_res

    text = Path(path).read_text()
    if Path(path).suffix.lower() in (".res", ".ins"):
        s, cloud = parse_res(text)
    else:
        s, cloud = cif_to_peaks(parse_cif(text))
    if len(cloud) == 0:
        raise ValueError(f"{path}: no Q peaks found")
    return s, cloud


@dataclass
class CountedStructure:
    structure: object
    h_counts: np.ndarray


def write_counted_cif(items) -> str:
    """Multi-block CIF of heavy-atom structures with per-site ``_atom_site_attached_hydrogens``."""
    from .cif_io import CifDocument, structure_to_cif, write_cif

    doc = CifDocument()
    for it in items:
        block = structure_to_cif(it.structure).blocks[0]
        loop = block.find_loop("_atom_site_label")
        if loop is not None:
            loop.tags.append(H_TAG)
            for row, c in zip(loop.rows, it.h_counts):
                row.append(str(int(c)))
        doc.blocks.append(block)
    return write_cif(doc)


def read_counted_cif(text: str) -> list[CountedStructure]:
    from .cif_io import IncompleteCifError, cif_to_structure, parse_cif

    out = []
    for block in parse_cif(text).blocks:
        s = cif_to_structure(block)
        loop = block.find_loop("_atom_site_label")
        tags = [t.lower() for t in loop.tags] if loop else []
        if H_TAG not in tags:
            raise IncompleteCifError(H_TAG)
        col = tags.index(H_TAG)
        counts = [int(r[col]) for r in loop.rows]
        out.append(CountedStructure(s, np.array(counts, dtype=int)))
    return out


def _load_model(path, flag: str, parser):
    from .weights import load_weights

    if not path:
        parser.error(f"{flag} is required")
    if not Path(path).is_file():
        parser.error(f"{flag}: weight file not found: {path}")
    with stage("load-weights"):
        return load_weights(path)


# --------------------------------------------------------------------------
# analyze


@dataclass(frozen=True)
class PipelineConfig:
    element_weights: str
    h_weights: str
    aux_radius: float = 3.2
    h_cap: int = 4
    threshold: float = 0.005
    out_dir: str = "."
    seed: int = 0

    def __post_init__(self):
        if not self.aux_radius > 0:
            raise ValueError("aux radius must be positive")
        if not 0 <= self.h_cap <= 4:
            raise ValueError("H-count cap must lie in 0..4")


def _heavy_structure(s, cloud, elements):
    from .elements import NOISE
    from .lattice import Site

    counters: dict[str, int] = {}
    sites = []
    for k, el in enumerate(elements):
        if el == NOISE:
            continue
        counters[el] = counters.get(el, 0) + 1
        sites.append(Site(f"{el}{counters[el]}", el, tuple(cloud.frac[k]), 1.0, 0.03))
    if not sites:
        raise ValueError("every peak was classified as noise")
    return s.with_sites(sites)


def analyze(cfg: PipelineConfig, input_path, hkl_path=None, wavelength=None, record_time=False):
    """Run the full pipeline and return ``{filename: contents}`` without touching the disk."""
    from .cif_io import parse_hkl, structure_to_cif, write_cif
    from .hydrogens import place_hydrogens, predict_h_counts
    from .model import predict_elements
    from .weights import load_weights
    from .xmetrics import evaluate_fit

    t0 = time.perf_counter()
    with stage("load-weights"):
        emodel = load_weights(cfg.element_weights)
        hmodel = load_weights(cfg.h_weights)
    with stage("read-input"):
        s, cloud = read_peak_input(input_path)
        refl = None
        if hkl_path:
            wl = wavelength or s.wavelength or 0.71073
            refl = parse_hkl(Path(hkl_path).read_text(), wl)
    with stage("elements"):
        ep = predict_elements(emodel, cloud)
        heavy = _heavy_structure(s, cloud, ep.elements)
        if wavelength or heavy.wavelength is None:
            heavy = replace(heavy, wavelength=wavelength or 0.71073)
    with stage("hydrogen-counts"):
        hp = predict_h_counts(hmodel, heavy, include_symmetry=True, aux_radius=cfg.aux_radius)
        counts = np.minimum(hp.counts, cfg.h_cap)
    with stage("hydrogen-placement"):
        placed = place_hydrogens(heavy, counts)
    metrics = None
    if refl is not None:
        with stage("metrics"):
            m = evaluate_fit(placed.structure, refl)
            metrics = {"k": m.k, "r1": m.r1, "s": m.s, "n_reflections": len(refl)}
    name = Path(input_path).stem
    top3 = ep.top(3)
    report = {
        "input": Path(input_path).name,
        "n_peaks": len(cloud),
        "peaks": [
            {"peak": cloud.names[k], "element": ep.elements[k], "top": [[el, p] for el, p in top3[k]]}
            for k in range(len(cloud))
        ],
        "hydrogens": [
            {"site": site.label, "count": int(c), "probs": [float(x) for x in pr]}
            for site, c, pr in zip(heavy.sites, counts, hp.probs)
        ],
        "placement_errors": [msg for _, msg in placed.errors],
        "n_hydrogens": len(placed.hydrogens),
        "metrics": metrics,
    }
    if record_time:
        report["wall_time_s"] = time.perf_counter() - t0
    with stage("write-output"):
        out = replace(placed.structure, name=name)
        files = {
            f"{name}.cif": write_cif(structure_to_cif(out)),
            f"{name}_report.json": json.dumps(report, indent=1, sort_keys=True) + "\n",
        }
    return files, time.perf_counter() - t0


def cmd_analyze(args, parser) -> int:
    for flag, val in (("--element-weights", args.element_weights), ("--h-weights", args.h_weights)):
        if not val:
            parser.error(f"{flag} is required")
        if not Path(val).is_file():
            parser.error(f"{flag}: weight file not found: {val}")
    if not Path(args.input).is_file():
        parser.error(f"input file not found: {args.input}")
    if args.hkl and not Path(args.hkl).is_file():
        parser.error(f"--hkl: file not found: {args.hkl}")
    try:
        cfg = PipelineConfig(args.element_weights, args.h_weights, args.aux_radius, args.h_cap,
                             args.threshold, args.out_dir, args.seed)
    except ValueError as exc:
        parser.error(str(exc))
    files, seconds = analyze(cfg, args.input, args.hkl, args.wavelength, args.record_time)
    for fname, data in files.items():
        atomic_write(Path(cfg.out_dir) / fname, data)
    print(f"analyzed {args.input} in {seconds:.2f} s -> {', '.join(sorted(files))}")
    return EXIT_OK


# --------------------------------------------------------------------------
# synth


def cmd_synth(args, parser) -> int:
    from .cif_io import write_res
    from .peaks import LabeledCloud, NoiseConfig, synthesize_cloud, write_dataset
    from . import synth

    if args.n < 1:
        parser.error("--n must be >= 1")
    noise = NoiseConfig(args.sigma_pos, args.sigma_height, args.spurious_rate)
    out = Path(args.out_dir)
    with stage("generate"):
        if args.large:
            crystals = [synth.large_crystal(args.large, args.seed)]
        elif args.kind == "hbond":
            crystals = synth.hbond_dataset(args.n, args.seed)
        else:
            crystals = [synth.random_crystal(args.seed, "elements", i) for i in range(args.n)]
        clouds = []
        for i, x in enumerate(crystals):
            lc = synthesize_cloud(x.structure, noise, seed=args.seed * 100003 + i)
            clouds.append(LabeledCloud(lc.cloud, lc.labels, x.structure.name))
        files = {
            "structures.cif": write_counted_cif(crystals),
            "peaks.txt": write_dataset(clouds),
        }
        if args.res:
            for x, lc in zip(crystals, clouds):
                files[f"{x.structure.name}.res"] = write_res(x.structure.with_sites(()), lc.cloud)
    with stage("write-output"):
        for fname, data in files.items():
            atomic_write(out / fname, data)
    print(f"wrote {len(crystals)} structures to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train / eval


def _train_config(args):
    from .trainer import TrainConfig

    base = TrainConfig.from_text(Path(args.config).read_text()) if args.config else TrainConfig()
    kw = {"seed": args.seed}
    for key in ("epochs", "batch_size", "lr"):
        v = getattr(args, key)
        if v is not None:
            kw[key] = v
    if args.folds:
        kw["k"] = args.folds
    return replace(base, **kw)


def _examples(args, task: str, data_path: str, seed: int, noise_seed_offset: int = 0):
    """Training examples plus (for the element task from structures) a per-epoch resampler."""
    from .peaks import NoiseConfig, read_dataset, synthesize_cloud
    from .trainer import element_examples, hcount_examples

    text = Path(data_path).read_text()
    if task == "hcount":
        items = read_counted_cif(text)
        return hcount_examples(items, include_symmetry=not args.no_aux), None
    if data_path.endswith(".cif"):
        items = read_counted_cif(text)
        noise = NoiseConfig()

        def clouds(epoch):
            return [synthesize_cloud(it.structure, noise, seed=(seed * 1000 + epoch) * 100003 + i) for i, it in enumerate(items)]

        return element_examples(clouds(0)), (lambda e: element_examples(clouds(e)))
    return element_examples(read_dataset(text)), None


def cmd_train(args, parser) -> int:
    from .model import ETConfig, ETModel, h_model_config
    from .trainer import cross_validate, kfold_split, train
    from .weights import save_weights

    if not Path(args.dataset).is_file():
        parser.error(f"--dataset: file not found: {args.dataset}")
    try:
        cfg = _train_config(args)
        arch = dict(hidden_dim=args.hidden, num_layers=args.layers, num_heads=args.heads, num_rbf=args.rbf, cutoff=args.cutoff)
        mcfg = h_model_config(**arch) if args.task == "hcount" else ETConfig(**arch)
    except (ValueError, OSError) as exc:
        parser.error(str(exc))
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    with stage("read-dataset"):
        data, resample = _examples(args, args.task, args.dataset, cfg.seed)
    with stage("train"):
        if args.folds:
            folds, best = cross_validate(lambda f: ETModel(mcfg, seed=cfg.seed + f), data, cfg, log)
            model = folds[best - 1].result.model
            history = folds[best - 1].result.history
            print(f"best fold {best}: " + ", ".join(f"{f.fold}:{f.report.micro_accuracy:.4f}" for f in folds))
        else:
            val = None
            train_idx = list(range(len(data)))
            if args.val_fraction > 0 and len(data) >= 2:
                k = max(2, int(round(1.0 / args.val_fraction)))
                held = set(kfold_split(range(len(data)), min(k, len(data)), cfg.seed)[0])
                train_idx = [i for i in range(len(data)) if i not in held]
                val = [data[i] for i in sorted(held)]
            tr = [data[i] for i in train_idx]
            rs = (lambda e: [resample(e)[i] for i in train_idx]) if (resample and args.resample_noise) else None
            res = train(ETModel(mcfg, seed=cfg.seed), tr, cfg, val, log, rs)
            model, history = res.model, res.history
    with stage("write-output"):
        import io

        buf = io.BytesIO()
        save_weights(model, buf)
        atomic_write(args.out, buf.getvalue())
        if args.history:
            atomic_write(args.history, "".join(f"{i + 1}\t{v!r}\n" for i, v in enumerate(history)))
    print(f"trained {args.task} model for {len(history)} epochs, final loss {history[-1]:.6f} -> {args.out}")
    return EXIT_OK


def cmd_eval(args, parser) -> int:
    from .elements import ELEMENT_CLASSES
    from .peaks import read_dataset
    from .trainer import Predictions, evaluate, report_from_predictions

    if not Path(args.dataset).is_file():
        parser.error(f"--dataset: file not found: {args.dataset}")
    if bool(args.weights) == bool(args.predictions):
        parser.error("give exactly one of --weights or --predictions")
    if args.predictions:
        if not Path(args.predictions).is_file():
            parser.error(f"--predictions: file not found: {args.predictions}")
        with stage("read-dataset"):
            truth = read_dataset(Path(args.dataset).read_text())
            pred = read_dataset(Path(args.predictions).read_text())
            if [len(t.labels) for t in truth] != [len(p.labels) for p in pred]:
                raise ValueError("prediction file does not line up with the dataset")
            C = len(ELEMENT_CLASSES)
            y = np.concatenate([t.class_indices for t in truth])
            yp = np.concatenate([p.class_indices for p in pred])
            probs = np.zeros((len(yp), C))
            probs[np.arange(len(yp)), yp] = 1.0
            owner = np.concatenate([np.full(len(t.labels), i) for i, t in enumerate(truth)])
        with stage("evaluate"):
            report = report_from_predictions(Predictions(probs, y, owner))
    else:
        model = _load_model(args.weights, "--weights", parser)
        task = "hcount" if model.config.feature_mode == "onehot" else "elements"
        with stage("read-dataset"):
            data, _ = _examples(args, task, args.dataset, args.seed)
        with stage("evaluate"):
            report = evaluate(model, data)
    print(report.to_table(), end="")
    if args.out:
        with stage("write-output"):
            atomic_write(args.out, report.to_json() + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare / rollout


def cmd_compare(args, parser) -> int:
    from .cif_io import cif_to_structure, parse_cif, parse_hkl
    from .xmetrics import compare_solutions

    for flag, p in (("--model", args.model), ("--expert", args.expert), ("--hkl", args.hkl)):
        if not Path(p).is_file():
            parser.error(f"{flag}: file not found: {p}")
    with stage("read-input"):
        ms = cif_to_structure(parse_cif(Path(args.model).read_text()))
        es = cif_to_structure(parse_cif(Path(args.expert).read_text()))
        wl = args.wavelength or ms.wavelength or 0.71073
        refl = parse_hkl(Path(args.hkl).read_text(), wl)
    with stage("compare"):
        v = compare_solutions(ms, es, refl, args.threshold)
    print(("flagged" if v.flagged else "not flagged") + f" margin={v.margin:.6f} threshold={v.threshold}")
    print(v.to_record())
    if args.out:
        with stage("write-output"):
            atomic_write(args.out, v.to_record() + "\n")
    return EXIT_OK


def cmd_rollout(args, parser) -> int:
    from .elements import CLASS_INDEX
    from .hydrogens import structure_graph
    from .interpret import class_weighted_rollout, export_embeddings, rollout_for
    from .model import cloud_graph

    model = _load_model(args.weights, "--weights", parser)
    if not Path(args.input).is_file():
        parser.error(f"input file not found: {args.input}")
    onehot = model.config.feature_mode == "onehot"
    with stage("read-input"):
        if onehot:
            from .cif_io import cif_to_structure, parse_cif, parse_res

            text = Path(args.input).read_text()
            s = parse_res(text)[0] if args.input.lower().endswith((".res", ".ins")) else cif_to_structure(parse_cif(text))
            graph = structure_graph(s, model.config.cutoff, True, args.aux_radius)
            names = [site.label for site in s.heavy().sites]
        else:
            _, cloud = read_peak_input(args.input)
            graph = cloud_graph(cloud, model.config.cutoff)
            names = list(cloud.names)
    with stage("rollout"):
        rmap, probs = rollout_for(model, graph)
        classes = [str(c) for c in range(model.config.num_classes)] if onehot else None
        if args.target is None:
            target = int(np.bincount(probs[: len(names)].argmax(axis=1)).argmax())
        elif onehot:
            target = int(args.target)
        else:
            if args.target not in CLASS_INDEX:
                raise ValueError(f"unknown target class {args.target}")
            target = CLASS_INDEX[args.target]
        act = class_weighted_rollout(rmap, probs, target)
        label = classes[target] if classes else args.target or _class_name(target)
        lines = ["node\tpredicted\trelevance\tactivation"]
        for k, nm in enumerate(names):
            top = int(np.argmax(probs[k]))
            lines.append(f"{nm}\t{classes[top] if classes else _class_name(top)}\t{float(rmap.relevance[k])!r}\t{float(act[k])!r}")
        files = {args.out: "\n".join(lines) + "\n"}
    if args.embeddings_dataset:
        with stage("embeddings"):
            data, _ = _examples(args, "hcount" if onehot else "elements", args.embeddings_dataset, args.seed)
            files[args.embeddings_out or "embeddings.tsv"] = export_embeddings(model, data).to_text()
    with stage("write-output"):
        for path, data in files.items():
            atomic_write(path, data)
    print(f"rollout for target class {label} over {len(names)} nodes -> {args.out}")
    return EXIT_OK


def _class_name(c: int) -> str:
    from .elements import ELEMENT_CLASSES

    return ELEMENT_CLASSES[c]


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peak2struct", description="Peak-cloud to crystal-structure pipeline.")
    p.add_argument("--seed", type=int, default=0, help="single source of randomness for every command")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="peaks -> elements -> H counts -> placed H -> CIF + report")
    a.add_argument("input", help=".res/.ins with Q peaks, or CIF with _atom_site_peak_height")
    a.add_argument("--element-weights", help="ETW1 weights of the heavy-atom model")
    a.add_argument("--h-weights", help="ETW1 weights of the hydrogen-count model")
    a.add_argument("--hkl", help="HKLF 4 reflections for R1/S")
    a.add_argument("--wavelength", type=float, help="override the wavelength (Å)")
    a.add_argument("--aux-radius", type=float, default=3.2, help="auxiliary-atom radius (Å)")
    a.add_argument("--h-cap", type=int, default=4, help="largest H count placed per atom")
    a.add_argument("--threshold", type=float, default=0.005, help="R1 comparison threshold")
    a.add_argument("--out-dir", default=".", help="output directory")
    a.add_argument("--record-time", action="store_true", help="add wall time to the report (breaks byte-identical reruns)")

    s = sub.add_parser("synth", help="write synthetic structures and peak clouds")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--kind", choices=("elements", "hbond"), default="elements")
    s.add_argument("--large", type=int, default=0, help="one P1 cell with about this many heavy atoms")
    s.add_argument("--sigma-pos", type=float, default=0.05)
    s.add_argument("--sigma-height", type=float, default=0.1)
    s.add_argument("--spurious-rate", type=float, default=0.05)
    s.add_argument("--res", action="store_true", help="also write one .res peak file per structure")

    t = sub.add_parser("train", help="train a heavy-atom or H-count model")
    t.add_argument("--dataset", required=True, help="peaks.txt, or structures.cif from synth")
    t.add_argument("--task", choices=("elements", "hcount"), default="elements")
    t.add_argument("--out", required=True, help="output weight file")
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--folds", type=int, default=0, help="k-fold cross-validation; keeps the best fold")
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--layers", type=int, default=4)
    t.add_argument("--heads", type=int, default=8)
    t.add_argument("--rbf", type=int, default=32)
    t.add_argument("--cutoff", type=float, default=5.0)
    t.add_argument("--no-aux", action="store_true", help="H-count graphs without symmetry-generated atoms")
    t.add_argument("--resample-noise", action="store_true", help="fresh peak noise every epoch (structures.cif input)")
    t.add_argument("--history", help="write per-epoch training loss here")
    t.add_argument("-v", "--verbose", action="store_true")

    e = sub.add_parser("eval", help="evaluation report for a model or a prediction file")
    e.add_argument("--dataset", required=True)
    e.add_argument("--weights")
    e.add_argument("--predictions", help="dataset-format file whose labels are predictions")
    e.add_argument("--no-aux", action="store_true")
    e.add_argument("--out", help="write the structured report here")

    c = sub.add_parser("compare", help="model vs expert solution against the same reflections")
    c.add_argument("--model", required=True, help="model solution CIF")
    c.add_argument("--expert", required=True, help="expert solution CIF")
    c.add_argument("--hkl", required=True)
    c.add_argument("--wavelength", type=float)
    c.add_argument("--threshold", type=float, default=0.005)
    c.add_argument("--out")

    r = sub.add_parser("rollout", help="attention rollout with class activation; optional embedding export")
    r.add_argument("input")
    r.add_argument("--weights")
    r.add_argument("--target", help="target class (element symbol, or count for H models); default: most predicted")
    r.add_argument("--aux-radius", type=float, default=3.2)
    r.add_argument("--out", default="rollout.tsv")
    r.add_argument("--embeddings-dataset")
    r.add_argument("--embeddings-out")
    r.add_argument("--no-aux", action="store_true")
    return p


COMMANDS = {
    "analyze": cmd_analyze,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "rollout": cmd_rollout,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return COMMANDS[args.command](args, sub)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    except StageError as exc:
        print(f"peak2struct {args.command}: error {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001
        print(f"peak2struct {args.command}: error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
