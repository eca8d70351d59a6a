"""Command-line entry points: train, eval, score, synth, report.

Configuration comes from flat INI files (``key = value`` under
sections); every key is schema-checked and unknown keys are rejected.
Flags override file values. All randomness flows from the single seed
named in the config or flags; nothing is time-seeded.

Exit codes: 0 ok, 1 config error (incl. usage), 2 data error,
3 numerical abort. The only environment variable read is METAOOD_LOG
(log level).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import diffcore as dc
from . import encoder as enc
from . import episodes as ep
from . import gmm
from . import synth
from . import trainer
from .objective import exact_auc

log = logging.getLogger("metaood")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema


_REQUIRED = object()


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1", "on"):
        return True
    if s.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(tok) for tok in s.split(","))


def _parse_opt_float(s: str):
    return None if not s.strip() else float(s)


TRAIN_SCHEMA = {
    "data": {
        "path": (str, _REQUIRED),
        "manifest": (str, None),
    },
    "encoder": {
        "hidden_dims": (_parse_int_list, (256, 256)),
        "latent_dim": (int, 256),
        "dropout_rate": (float, 0.1),
    },
    "episodes": {
        "n_way": (int, 5),
        "support_per_class": (int, 5),
        "id_query_per_class": (int, 5),
        "ood_query_total": (int, 25),
        "ood_mode": (str, "pooled"),
    },
    "val_episodes": {
        "n_way": (int, None),
        "support_per_class": (int, None),
        "id_query_per_class": (int, None),
        "ood_query_total": (int, None),
        "ood_mode": (str, None),
    },
    "train": {
        "objective": (str, "auc"),
        "variant": (str, "full_gmm"),
        "temperature": (float, 1.0),
        "bandwidth": (_parse_opt_float, None),
        "shrinkage_inside": (_parse_bool, False),
        "learning_rate": (float, 1e-3),
        "adam_beta1": (float, 0.9),
        "adam_beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "max_epochs": (int, 5000),
        "episodes_per_epoch": (int, 100),
        "val_episodes": (int, 64),
        "patience": (int, 100),
        "grad_clip": (float, 10.0),
        "seed": (int, 0),
    },
}

SYNTH_SCHEMA = {
    "generator": {
        "n_tasks": (int, 15),
        "classes_per_task": (int, 3),
        "points_per_class": (int, 40),
        "signal_dim": (int, 2),
        "noise_dim": (int, 12),
        "noise_scale": (float, 20.0),
        "mean_separation": (float, 10.0),
        "cov_eig_min": (float, 0.5),
        "cov_eig_max": (float, 1.5),
        "warp_layers": (int, 2),
        "warp_hidden": (int, 16),
        "warp_scale": (float, 1.0),
        "train_fraction": (float, 0.6),
        "val_fraction": (float, 0.2),
        "test_fraction": (float, 0.2),
        "seed": (int, 0),
    },
}


def load_config(path, overrides: list[str], schema: dict) -> dict:
    """Parse + validate an INI config; ``--set section.key=value`` wins."""
    parser = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            parser.read_string(p.read_text(), source=str(p))
        except configparser.Error as err:
            raise ConfigError(f"cannot parse {p}: {err}") from err

    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section.strip(), key.strip(), value.strip())

    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in schema[section]:
                raise ConfigError(f"unknown config key {section}.{key}")

    resolved: dict = {}
    for section, keys in schema.items():
        resolved[section] = {}
        for key, (convert, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    resolved[section][key] = convert(raw)
                except ValueError as err:
                    raise ConfigError(f"bad value for {section}.{key}: {err}") from err
            elif default is _REQUIRED:
                raise ConfigError(f"missing required config key {section}.{key}")
            else:
                resolved[section][key] = default
    return resolved


def write_run_manifest(outdir: Path, command: str, config: dict, seed: int) -> None:
    blob = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": config,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "seed": seed,
        "git_revision": _git_revision(),
    }
    (outdir / "run_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _git_revision() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() if out.returncode == 0 else None
    except OSError:
        return None


def _variant_from(name: str, temperature: float = 1.0, bandwidth=None,
                  shrinkage_inside: bool = False) -> gmm.VariantSpec:
    try:
        return gmm.VariantSpec(kind=name, temperature=temperature,
                               bandwidth=bandwidth,
                               shrinkage_inside=shrinkage_inside)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _episode_spec_from(section: dict, fallback: dict | None = None) -> ep.EpisodeSpec:
    merged = dict(fallback) if fallback else {}
    merged.update({k: v for k, v in section.items() if v is not None})
    try:
        return ep.EpisodeSpec(**merged)
    except ValueError as err:
        raise ConfigError(str(err)) from err


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    config = load_config(args.config, args.set, TRAIN_SCHEMA)
    if args.seed is not None:
        config["train"]["seed"] = args.seed
    data_path = Path(config["data"]["path"])
    if not data_path.exists():
        log.error("dataset not found: %s", data_path)
        return EXIT_DATA
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    data = ep.load_epds(data_path, config["data"]["manifest"])
    enc_cfg = enc.EncoderConfig(
        input_dim=data.input_dim,
        hidden_dims=config["encoder"]["hidden_dims"],
        latent_dim=config["encoder"]["latent_dim"],
        dropout_rate=config["encoder"]["dropout_rate"],
    )
    tr = config["train"]
    variant = _variant_from(tr["variant"], tr["temperature"], tr["bandwidth"],
                            tr["shrinkage_inside"])
    if tr["objective"] == "cross_entropy" and variant.kind in ("single_gaussian", "kde"):
        raise ConfigError(
            f"objective cross_entropy needs a class-aware variant, not {variant.kind}")
    episode_spec = _episode_spec_from(config["episodes"])
    val_section = config["val_episodes"]
    val_spec = (None if all(v is None for v in val_section.values())
                else _episode_spec_from(val_section, fallback=config["episodes"]))
    train_cfg = trainer.TrainConfig(
        episode_spec=episode_spec,
        objective=tr["objective"],
        variant=variant,
        learning_rate=tr["learning_rate"],
        adam_beta1=tr["adam_beta1"],
        adam_beta2=tr["adam_beta2"],
        adam_eps=tr["adam_eps"],
        max_epochs=tr["max_epochs"],
        episodes_per_epoch=tr["episodes_per_epoch"],
        val_episodes=tr["val_episodes"],
        patience=tr["patience"],
        grad_clip=tr["grad_clip"],
        seed=tr["seed"],
        val_episode_spec=val_spec,
    )
    write_run_manifest(outdir, "train", config, tr["seed"])

    try:
        best, tlog = trainer.train(data, enc_cfg, train_cfg)
    except trainer.TrainingAborted as err:
        log.error("training aborted: %s", err)
        enc.save_checkpoint(outdir / "checkpoint_last_good.ckpt", err.params)
        err.log.aborted = True
        err.log.diagnostic = str(err)
        err.log.to_csv(outdir / "trainlog.csv")
        (outdir / "abort_diagnostic.txt").write_text(str(err) + "\n")
        return EXIT_NUMERIC

    enc.save_checkpoint(outdir / "checkpoint_best.ckpt", best)
    if tlog.final_params is not None:
        enc.save_checkpoint(outdir / "checkpoint_final.ckpt", tlog.final_params)
    tlog.to_csv(outdir / "trainlog.csv")
    best_rec = max(tlog.records, key=lambda r: r.val_auc) if tlog.records else None
    if best_rec:
        print(f"best epoch {tlog.best_epoch}: validation AUC {best_rec.val_auc:.4f}")
    print(f"wrote {outdir / 'checkpoint_best.ckpt'}")
    return EXIT_OK


EVAL_CSV_HEADER = ("episode_index", "task_id", "auc", "accuracy")


def cmd_eval(args) -> int:
    ck_path, data_path = Path(args.checkpoint), Path(args.data)
    for p in (ck_path, data_path):
        if not p.exists():
            log.error("file not found: %s", p)
            return EXIT_DATA
    params = enc.load_checkpoint(ck_path)
    data = ep.load_epds(data_path, args.manifest)
    if data.input_dim != params.config.input_dim:
        log.error("checkpoint expects input_dim %d but dataset has %d",
                  params.config.input_dim, data.input_dim)
        return EXIT_DATA

    try:
        spec = ep.EpisodeSpec(n_way=args.n_way, support_per_class=args.support,
                              id_query_per_class=args.id_queries,
                              ood_query_total=args.ood_queries,
                              ood_mode=args.ood_mode)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    variant = _variant_from(args.variant, args.temperature, args.bandwidth,
                            args.shrinkage_inside)
    episodes = ep.fixed_eval_episodes(data, spec, args.episodes, seed=args.seed,
                                      split=args.split)
    report = trainer.evaluate(params, episodes, variant,
                              collect_scores=args.plot is not None)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "episodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_CSV_HEADER)
        for i, (task, auc, acc) in enumerate(zip(report.episode_task,
                                                 report.episode_auc,
                                                 report.episode_accuracy)):
            writer.writerow([i, task, repr(float(auc)), repr(float(acc))])
    write_run_manifest(outdir, "eval", {
        "checkpoint": str(ck_path), "data": str(data_path),
        "split": args.split, "episodes": args.episodes,
        "episode_spec": dataclasses.asdict(spec),
        "variant": args.variant, "seed": args.seed,
    }, args.seed)

    if args.plot is not None:
        _plot_score_histograms(report, Path(args.plot))
    print(f"AUC {report.auc_mean:.4f} +/- {report.auc_stderr:.4f}   "
          f"accuracy {report.accuracy_mean:.4f} +/- {report.accuracy_stderr:.4f}   "
          f"({report.n} episodes)")
    return EXIT_OK


def _plot_score_histograms(report: trainer.EvalReport, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    id_pool = np.concatenate(report.id_scores)
    ood_pool = np.concatenate(report.ood_scores)
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.histogram_bin_edges(np.concatenate([id_pool, ood_pool]), bins=40)
    ax.hist(id_pool, bins=bins, alpha=0.6, label="ID queries", density=True)
    ax.hist(ood_pool, bins=bins, alpha=0.6, label="OoD queries", density=True)
    ax.set_xlabel("OoD score (negative log density)")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg")
    plt.close(fig)


SCORE_CSV_HEADER = ("query_index", "ood_score", "predicted_class")


def _read_feature_csv(path: Path, expect_label: bool) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ep.DatasetError(f"{path}: empty file (no header)")
        rows = list(reader)
    header = [h.strip() for h in header]
    label_col = None
    if expect_label:
        if "label" not in header:
            raise ep.DatasetError(f"{path}: support file needs a 'label' column")
        label_col = header.index("label")
    feat_cols = [i for i in range(len(header)) if i != label_col]
    feats = np.array([[float(r[i]) for i in feat_cols] for r in rows], dtype=np.float64)
    if not rows:
        feats = feats.reshape(0, len(feat_cols))
    labels = (np.array([int(float(r[label_col])) for r in rows], dtype=np.int64)
              if expect_label else None)
    return feats, labels


def cmd_score(args) -> int:
    ck_path = Path(args.checkpoint)
    sup_path, qry_path = Path(args.support), Path(args.query)
    for p in (ck_path, sup_path, qry_path):
        if not p.exists():
            log.error("file not found: %s", p)
            return EXIT_DATA
    params = enc.load_checkpoint(ck_path)
    sup_x, sup_labels = _read_feature_csv(sup_path, expect_label=True)
    qry_x, _ = _read_feature_csv(qry_path, expect_label=False)
    if sup_x.shape[0] < 2:
        log.error("support file %s has %d row(s); need at least 2", sup_path,
                  sup_x.shape[0])
        return EXIT_DATA
    if sup_x.shape[1] != params.config.input_dim:
        log.error("support has %d features, checkpoint expects %d",
                  sup_x.shape[1], params.config.input_dim)
        return EXIT_DATA

    classes = np.unique(sup_labels)
    remap = {int(c): k for k, c in enumerate(classes)}
    labels = np.array([remap[int(c)] for c in sup_labels])
    counts = np.bincount(labels)

    out_path = Path(args.out)
    if qry_x.shape[0] == 0:
        with open(out_path, "w", newline="") as fh:
            csv.writer(fh).writerow(SCORE_CSV_HEADER)
        _write_score_manifest(out_path, ck_path, sup_path, qry_path)
        print(f"wrote {out_path} (0 queries)")
        return EXIT_OK
    if qry_x.shape[1] != params.config.input_dim:
        log.error("query has %d features, checkpoint expects %d",
                  qry_x.shape[1], params.config.input_dim)
        return EXIT_DATA

    sup_z = enc.embed(params, dc.Array(sup_x))
    qry_z = enc.embed(params, dc.Array(qry_x))
    sup_std, qry_std, _ = enc.standardize(sup_z, qry_z)
    lowrank = gmm.prefer_lowrank(params.config.latent_dim, counts)
    log.info("scoring path: %s (latent_dim=%d, max class size=%d)",
             "low-rank" if lowrank else "direct", params.config.latent_dim,
             int(counts.max()))
    if lowrank:
        terms = gmm.class_log_terms_lowrank(sup_std, labels, params.shrinkage(),
                                            qry_std)
    else:
        fitted = gmm.adapt(sup_std, labels, params.shrinkage())
        terms = gmm._class_log_terms(fitted, qry_std)
    scores = -dc.logsumexp(terms, axis=1).data
    pred = classes[terms.data.argmax(axis=1)]

    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_CSV_HEADER)
        for i, (s, p) in enumerate(zip(scores, pred)):
            writer.writerow([i, repr(float(s)), int(p)])
    _write_score_manifest(out_path, ck_path, sup_path, qry_path)
    print(f"wrote {out_path} ({len(scores)} queries)")
    return EXIT_OK


def _write_score_manifest(out_path: Path, ck: Path, sup: Path, qry: Path) -> None:
    manifest = {
        "command": "score",
        "package_version": __version__,
        "inputs": {str(p): hashlib.sha256(p.read_bytes()).hexdigest()
                   for p in (ck, sup, qry)},
        "git_revision": _git_revision(),
    }
    out_path.with_name(out_path.stem + ".manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    config = load_config(args.config, args.set, SYNTH_SCHEMA)
    g = config["generator"]
    if args.seed is not None:
        g["seed"] = args.seed
    try:
        spec = synth.GeneratorSpec(
            n_tasks=g["n_tasks"], classes_per_task=g["classes_per_task"],
            points_per_class=g["points_per_class"], signal_dim=g["signal_dim"],
            noise_dim=g["noise_dim"], noise_scale=g["noise_scale"],
            mean_separation=g["mean_separation"],
            cov_eigenvalues=(g["cov_eig_min"], g["cov_eig_max"]),
            warp_layers=g["warp_layers"], warp_hidden=g["warp_hidden"],
            warp_scale=g["warp_scale"],
            split_fractions=(g["train_fraction"], g["val_fraction"],
                             g["test_fraction"]),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    data, truth = synth.synth_tasks(spec, seed=g["seed"])
    ep.save_epds(out_path, data.features, data.class_labels, data.task_ids,
                 data.split_by_task,
                 extra_manifest={"generator": synth.vars_of(spec),
                                 "generator_seed": g["seed"],
                                 "categories_per_split": _split_category_counts(data)})
    truth.save(_truth_path(out_path))
    print(f"wrote {out_path}: N={data.n}, input_dim={data.input_dim}, "
          f"{spec.n_tasks} tasks x {spec.classes_per_task} classes")
    return EXIT_OK


def _truth_path(epds_path: Path) -> Path:
    return epds_path.with_name(epds_path.stem + ".truth.json")


def _split_category_counts(data: ep.TaskDataset) -> dict:
    counts = {}
    for split in ep.SPLITS:
        counts[split] = sum(len(data.classes_of_task(t))
                            for t in data.tasks_in_split(split))
    return counts


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        p = Path(path)
        if not p.exists():
            log.error("file not found: %s", p)
            return EXIT_DATA
        with open(p, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != list(EVAL_CSV_HEADER):
                log.error("%s: unexpected header %s", p, reader.fieldnames)
                return EXIT_DATA
            aucs, accs = [], []
            for rec in reader:
                aucs.append(float(rec["auc"]))
                accs.append(float(rec["accuracy"]))
        rows.append((str(p), np.asarray(aucs), np.asarray(accs)))

    print(f"{'run':40s} {'episodes':>8s} {'auc':>16s} {'accuracy':>16s}")
    run_aucs = []
    for name, aucs, accs in rows:
        accs_ok = accs[~np.isnan(accs)]
        acc_txt = (f"{np.mean(accs_ok):.4f}+/-{trainer._stderr(accs_ok):.4f}"
                   if len(accs_ok) else "n/a")
        print(f"{name:40s} {len(aucs):8d} "
              f"{np.mean(aucs):8.4f}+/-{trainer._stderr(aucs):.4f} {acc_txt:>16s}")
        run_aucs.append(np.mean(aucs))
    if len(rows) > 1:
        pooled = np.asarray(run_aucs)
        print(f"{'mean over runs':40s} {len(rows):8d} "
              f"{np.mean(pooled):8.4f}+/-{trainer._stderr(pooled):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaood",
        description="Meta-learned latent-density OoD detection for few-shot tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="meta-train a shared encoder")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on fixed episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="EPDS dataset")
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test", choices=ep.SPLITS)
    p.add_argument("--episodes", type=int, default=64)
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--support", type=int, default=5)
    p.add_argument("--id-queries", type=int, default=5)
    p.add_argument("--ood-queries", type=int, default=25)
    p.add_argument("--ood-mode", default="single_class",
                   choices=("pooled", "single_class"))
    p.add_argument("--variant", default="full_gmm")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--shrinkage-inside", action="store_true",
                   help="divide the ridge by the class size, matching a model "
                        "trained with train.shrinkage_inside")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plot", default=None, help="write an ID/OoD score histogram (SVG)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="score query instances against a support set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support", required=True, help="CSV with a 'label' column")
    p.add_argument("--query", required=True, help="CSV of feature rows")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("synth", help="generate a synthetic EPDS dataset")
    p.add_argument("--config", default=None, help="INI config file (optional)")
    p.add_argument("--out", required=True, help="output .epds path")
    p.add_argument("--seed", type=int, default=None, help="override generator.seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="aggregate per-episode eval CSVs")
    p.add_argument("inputs", nargs="+", help="episodes.csv files from eval runs")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("METAOOD_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage errors; usage problems are config errors here
        return EXIT_OK if err.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except (ep.DatasetError, ep.SamplingError, enc.CheckpointError, OSError) as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    except trainer.TrainingAborted as err:
        log.error("numerical abort: %s", err)
        return EXIT_NUMERIC
    except (dc.NonFiniteError, dc.NotPositiveDefiniteError, gmm.AdaptError) as err:
        log.error("numerical error: %s", err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
