import json
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import click
import yaml

import catalog as catalog_ops
import deep_matcher
import evalgrid
import local_matcher
import report as report_ops
import simgen
import splitting
import trainer
from config import DEFAULT_RATIO_GRID, DEFAULT_RATIO_THRESHOLD, DEFAULT_SEED, DEFAULT_THREADS, TRAIN_EPOCHS, logger
from errors import WildReidError
from knn_core import read_embeddings
from metric_losses import ArcFaceConfig, TripletConfig
from storage import atomic_write


@dataclass(frozen=True)
class CommandConfig:
    seed: int
    threads: int
    output: Optional[Path]

    def require_output(self) -> Path:
        if self.output is None:
            raise click.UsageError("--output is required for this command")
        return self.output


class DomainErrorGroup(click.Group):
    """Domain errors exit with status 1 and their message on stderr; usage errors keep click's 2."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except WildReidError as e:
            logger.error(f"[CLI] {type(e).__name__}: {e}")
            raise click.ClickException(str(e)) from e


def _write_text(path: Optional[Path], text: str) -> None:
    if path is None:
        click.echo(text, nl=False)
        return
    with atomic_write(path, "w") as fh:
        fh.write(text)


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@click.group(cls=DomainErrorGroup)
@click.option("--seed", type=click.IntRange(min=0), default=DEFAULT_SEED, show_default=True,
              help="Seed for every randomized step.")
@click.option("--threads", type=click.IntRange(min=1), default=DEFAULT_THREADS, show_default=True,
              help="Worker threads (default from WILDREID_THREADS).")
@click.option("--output", "-o", type=click.Path(path_type=Path), default=None,
              help="Primary output file (or directory for simgen).")
@click.pass_context
def cli(ctx, seed, threads, output):
    """Wildlife re-identification toolkit over embedding and descriptor files."""
    ctx.obj = CommandConfig(seed, threads, output)


@cli.command()
@click.argument("metadata", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--delimiter", default=",", show_default=True)
@click.option("--name", default=None, help="Catalog name (default: file stem).")
@click.option("--image-id-col", default="image_id", show_default=True)
@click.option("--identity-col", default="identity", show_default=True)
@click.option("--dataset-col", default="dataset", show_default=True)
@click.option("--timestamp-col", default="timestamp", show_default=True)
@click.option("--payload-col", default="payload_ref", show_default=True)
@click.pass_obj
def ingest(cfg: CommandConfig, metadata, delimiter, name, image_id_col, identity_col, dataset_col,
           timestamp_col, payload_col):
    """Read a metadata file and write it in the canonical catalog layout."""
    schema = catalog_ops.CatalogSchema(image_id_col, identity_col, dataset_col, timestamp_col, payload_col)
    catalog = catalog_ops.ingest(metadata, schema, delimiter=delimiter, name=name)
    catalog_ops.emit(catalog, cfg.require_output())


@cli.command()
@click.argument("catalog_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--delimiter", default=",", show_default=True)
@click.pass_obj
def stats(cfg: CommandConfig, catalog_file, delimiter):
    """Image and identity counts of a catalog."""
    summary = catalog_ops.stats(catalog_ops.ingest(catalog_file, delimiter=delimiter))
    _write_text(cfg.output, _dump_json(summary.as_dict()))


@cli.command()
@click.option("--catalog", "catalog_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--mode", type=click.Choice([k.value for k in splitting.SplitKind]), default="closed",
              show_default=True)
@click.option("--ratio", type=float, default=0.8, show_default=True, help="Train (reference) ratio.")
@click.option("--fraction", type=float, default=None, help="New-identity fraction for open-set splits.")
@click.pass_obj
def split(cfg: CommandConfig, catalog_file, mode, ratio, fraction):
    """Split a catalog into reference and query image ids."""
    catalog = catalog_ops.ingest(catalog_file)
    manifest = splitting.split(catalog, splitting.SplitMode(mode, fraction), ratio, cfg.seed)
    splitting.save_manifest(manifest, cfg.require_output())


@cli.command("verify-split")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--catalog", "catalog_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_obj
def verify_split(cfg: CommandConfig, manifest, catalog_file):
    """Audit a split manifest; exits 1 when any rule is violated."""
    violations = splitting.verify(splitting.load_manifest(manifest), catalog_ops.ingest(catalog_file))
    _write_text(cfg.output, "".join(f"{v}\n" for v in violations))
    if violations:
        raise click.ClickException(f"{len(violations)} split violation(s)")


@cli.command()
@click.option("--db", "db_file", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Reference embeddings (WDEM).")
@click.option("--query", "query_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Query embeddings (WDEM).")
@click.option("--catalog", "catalog_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Catalog holding the reference labels.")
@click.option("--k-vote", type=click.IntRange(min=1), default=1, show_default=True)
@click.pass_obj
def match(cfg: CommandConfig, db_file, query_file, catalog_file, k_vote):
    """1-NN (or k-vote) identity prediction for every query embedding."""
    catalog = catalog_ops.ingest(catalog_file)
    db = deep_matcher.database_from_catalog(read_embeddings(db_file), catalog)
    query = read_embeddings(query_file)
    predictions = deep_matcher.match(db, query, k_vote=k_vote, n_jobs=cfg.threads)
    deep_matcher.write_predictions(predictions, cfg.require_output())
    if all(q in catalog for q in query.row_ids):
        accuracy = deep_matcher.evaluate(predictions, catalog.labels_for(query.row_ids))
        logger.info(f"[CLI] Query accuracy {accuracy:.4f}")


def _ratio_config(threshold: float, aggregation: str, grid: Optional[str]) -> local_matcher.RatioTestConfig:
    try:
        candidates = tuple(float(t) for t in grid.split(",")) if grid else DEFAULT_RATIO_GRID
    except ValueError:
        raise click.BadParameter(f"'{grid}' is not a comma-separated list of numbers", param_hint="--grid") from None
    return local_matcher.RatioTestConfig(threshold, candidates, aggregation)


@cli.command("local-match")
@click.option("--reference", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Reference descriptor sets (WDDS).")
@click.option("--query", "query_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path), help="Query descriptor sets (WDDS).")
@click.option("--catalog", "catalog_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--threshold", type=float, default=DEFAULT_RATIO_THRESHOLD, show_default=True)
@click.option("--calibrate/--no-calibrate", default=False, help="Pick the threshold on the reference set first.")
@click.option("--grid", default=None, help="Comma-separated calibration thresholds.")
@click.option("--aggregation", type=click.Choice(local_matcher.AGGREGATIONS), default="image", show_default=True)
@click.pass_obj
def local_match(cfg: CommandConfig, reference, query_file, catalog_file, threshold, calibrate, grid, aggregation):
    """Identify query images by ratio-test correspondence counts."""
    catalog = catalog_ops.ingest(catalog_file)
    references = local_matcher.read_descriptors(reference)
    identities = dict(zip((r.image_id for r in references), catalog.labels_for(r.image_id for r in references)))
    ratio_cfg = _ratio_config(threshold, aggregation, grid)
    if calibrate:
        chosen = local_matcher.calibrate_threshold(references, identities, ratio_cfg, n_jobs=cfg.threads)
        ratio_cfg = _ratio_config(chosen.threshold, aggregation, grid)
    queries = local_matcher.read_descriptors(query_file)
    predictions = local_matcher.identify(queries, references, identities, ratio_cfg, n_jobs=cfg.threads)
    deep_matcher.write_predictions(predictions, cfg.require_output())


@cli.command()
@click.option("--reference", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--catalog", "catalog_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--grid", default=None, help="Comma-separated candidate thresholds.")
@click.option("--aggregation", type=click.Choice(local_matcher.AGGREGATIONS), default="image", show_default=True)
@click.pass_obj
def calibrate(cfg: CommandConfig, reference, catalog_file, grid, aggregation):
    """Leave-one-out ratio threshold calibration on a reference set."""
    catalog = catalog_ops.ingest(catalog_file)
    references = local_matcher.read_descriptors(reference)
    identities = dict(zip((r.image_id for r in references), catalog.labels_for(r.image_id for r in references)))
    result = local_matcher.calibrate_threshold(
        references, identities, _ratio_config(DEFAULT_RATIO_THRESHOLD, aggregation, grid), n_jobs=cfg.threads)
    doc = {"threshold": result.threshold,
           "accuracy": {f"{t:.2f}": a for t, a in result.accuracy.items()}}
    _write_text(cfg.output, yaml.safe_dump(doc, sort_keys=False))


@cli.command("train-head")
@click.option("--features", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--catalog", "catalog_file", required=True,
              type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path),
              help="Split manifest; the head is trained on its reference ids.")
@click.option("--method", type=click.Choice(evalgrid.METHODS), default="arcface", show_default=True)
@click.option("--margin", type=float, default=None, help="Loss margin (ArcFace 0.5, Triplet 0.2).")
@click.option("--scale", type=float, default=64.0, show_default=True)
@click.option("--mining", type=click.Choice(["all", "semi", "hard"]), default="all", show_default=True)
@click.option("--lr", type=float, default=0.001, show_default=True)
@click.option("--epochs", type=click.IntRange(min=1), default=TRAIN_EPOCHS, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=128, show_default=True)
@click.option("--embedding-dim", type=click.IntRange(min=1), default=None)
@click.option("--trace", type=click.Path(path_type=Path), default=None, help="Per-epoch trace CSV.")
@click.pass_obj
def train_head(cfg: CommandConfig, features, catalog_file, manifest, method, margin, scale, mining, lr, epochs,
               batch_size, embedding_dim, trace):
    """Train a linear projection head with ArcFace or Triplet loss."""
    catalog = catalog_ops.ingest(catalog_file)
    train_ids = sorted(splitting.load_manifest(manifest).train_ids)
    reference = read_embeddings(features).select(train_ids)
    if method == "arcface":
        loss_config = ArcFaceConfig(margin=0.5 if margin is None else margin, scale=scale)
    else:
        loss_config = TripletConfig(margin=0.2 if margin is None else margin, mining=mining)
    trainer_config = trainer.TrainerConfig(lr=lr, epochs=epochs, batch_size=batch_size,
                                           embedding_dim=embedding_dim, seed=cfg.seed)
    output = cfg.require_output()
    head = trainer.train_head(reference, catalog.labels_for(train_ids), loss_config, trainer_config)
    trainer.save_projection(head, output)
    trainer.write_trace(head.trace, trace or output.with_suffix(".trace.csv"))


def _load_grid_dataset(directory: Path) -> evalgrid.GridDataset:
    catalog = catalog_ops.ingest(directory / "catalog.csv", name=directory.name)
    per_backbone = sorted(directory.glob("embeddings.*.wdem"))
    if per_backbone:
        features = {p.name[len("embeddings."):-len(".wdem")]: read_embeddings(p) for p in per_backbone}
    else:
        features = read_embeddings(directory / "embeddings.wdem")
    manifest = splitting.load_manifest(directory / "split.yaml")
    return evalgrid.GridDataset(directory.name, catalog, features, manifest)


@cli.command()
@click.option("--spec", "spec_file", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Grid spec YAML (default: the backbone x lr x loss grid).")
@click.option("--datasets", "dataset_dirs", multiple=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.argument("extra_dirs", nargs=-1, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--epochs", type=click.IntRange(min=1), default=TRAIN_EPOCHS, show_default=True)
@click.option("--dry-run", is_flag=True, help="Only enumerate the settings.")
@click.pass_obj
def grid(cfg: CommandConfig, spec_file, dataset_dirs, extra_dirs, epochs, dry_run):
    """Train and evaluate every grid setting on every dataset directory.

    Each directory holds catalog.csv, embeddings.wdem (or embeddings.<backbone>.wdem) and split.yaml.
    Records already present in the output file are not re-run. Runs are journaled to
    <output>.partial and the output is only replaced once the whole grid has finished.
    """
    spec = evalgrid.load_grid_spec(spec_file) if spec_file else evalgrid.backbone_loss_grid()
    settings = evalgrid.enumerate_settings(spec)
    if dry_run:
        _write_text(cfg.output, "".join(f"{evalgrid.setting_key(s)}\n" for s in settings))
        return
    directories = list(dataset_dirs) + list(extra_dirs)
    if not directories:
        raise click.UsageError("At least one dataset directory is required")
    datasets = [_load_grid_dataset(d) for d in directories]
    output = cfg.require_output()
    journal = output.with_name(output.name + ".partial")
    if output.exists() and not journal.exists():
        shutil.copyfile(output, journal)
    records = evalgrid.run_grid(settings, datasets, n_jobs=cfg.threads, seed=cfg.seed, epochs=epochs,
                                records_path=journal)
    # rewrite in canonical order so reruns are byte-identical
    evalgrid.save_records(records, output)
    journal.unlink()


@cli.command()
@click.option("--records", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--group-by", default="setting", show_default=True,
              help="setting, dataset, method or setting axes, comma-separated (e.g. backbone,method).")
@click.pass_obj
def aggregate(cfg: CommandConfig, records, group_by):
    """Median, quartiles and boxplot data of run accuracies per group."""
    stats_by_group = evalgrid.aggregate(evalgrid.load_records(records), group_by)
    _write_text(cfg.output, _dump_json(evalgrid.export_boxplot(stats_by_group)))


@cli.command()
@click.option("--records", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--table", "table_file", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="Delimited per-method accuracies (header: dataset,<method>...).")
@click.option("--markdown", type=click.Path(path_type=Path), default=None)
@click.option("--delimiter", default=",", show_default=True)
@click.option("--columns", default="method", show_default=True,
              help="Column axes for --records tables, same names as aggregate --group-by.")
@click.pass_obj
def report(cfg: CommandConfig, records, table_file, markdown, delimiter, columns):
    """Per-dataset accuracy table with best and second-best marks."""
    if (records is None) == (table_file is None):
        raise click.UsageError("Give exactly one of --records or --table")
    if records is not None:
        table = report_ops.table_from_records(evalgrid.load_records(records), column_by=columns)
    else:
        table = report_ops.read_table(table_file, delimiter)
    if cfg.output is None:
        click.echo(report_ops.to_markdown(table), nl=False)
        return
    report_ops.write_report(table, cfg.output, delimiter, markdown)


@cli.command("simgen")
@click.option("--identities", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--images", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--dim", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--concentration", type=float, default=100.0, show_default=True, help="'inf' for zero noise.")
@click.option("--descriptors", type=click.IntRange(min=0), default=0, show_default=True,
              help="Descriptors per image (0 skips descriptor output).")
@click.option("--days", type=click.IntRange(min=1), default=None, help="Distinct days per identity.")
@click.option("--orthogonal/--random-means", default=False)
@click.option("--name", default=None, help="Dataset name (default: output directory name).")
@click.pass_obj
def simgen_cmd(cfg: CommandConfig, identities, images, dim, concentration, descriptors, days, orthogonal, name):
    """Write a synthetic dataset directory."""
    out = cfg.require_output()
    spec = simgen.SimSpec(identities, images, dim, concentration, cfg.seed, days, orthogonal, name or out.name)
    simgen.write_dataset(out, spec, descriptors or None, n_jobs=cfg.threads)


def main():
    cli(prog_name="wildreid")


if __name__ == "__main__":
    sys.exit(main())
