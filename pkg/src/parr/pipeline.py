"""End-to-end plumbing shared by the CLI and the test suite.

Each function takes the resolved run config plus file paths and performs one
pipeline stage: data generation, recognizer training/evaluation, retrieval
head training/evaluation, and batch search.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, CrossTransformerBackbone
from .checkpoint import (
    load_checkpoint,
    load_into_module,
    module_hash,
    save_checkpoint,
    state_arrays,
)
from .config import (
    backbone_config_from,
    heads_config_from,
    par_train_config_from,
    ret_train_config_from,
    synth_config_kwargs,
)
from .errors import CheckpointError, ConfigError, ManifestError
from .margin import (
    RetrievalHeads,
    backbone_feature_matrix,
    freeze,
    load_heads,
    query_vector,
    save_heads,
    train_ret,
)
from .queries import HashEmbeddingProvider
from .recognition import evaluate_par, train_par
from .report import (
    validate_report,
    write_json_report,
    write_loss_curve,
    write_per_attribute_csv,
)
from .retrieval import build_index, evaluate_retrieval, search
from .schema import AttributeSchema, load_schema, save_schema
from .synth import Manifest, SynthConfig, generate_dataset, load_manifest, load_split_arrays


def _backbone_config_dict(cfg: BackboneConfig) -> dict:
    out = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def _backbone_config_load(data: dict) -> BackboneConfig:
    kwargs = {}
    for field in dataclasses.fields(BackboneConfig):
        if field.name not in data:
            continue
        value = data[field.name]
        kwargs[field.name] = tuple(value) if isinstance(value, list) else value
    return BackboneConfig(**kwargs)


def save_backbone(
    path, model: CrossTransformerBackbone, schema: AttributeSchema, seed: int
) -> None:
    config = {
        "kind": "backbone",
        "backbone": _backbone_config_dict(model.cfg),
        "schema": schema.to_json_dict(),
        "seed": seed,
    }
    save_checkpoint(path, state_arrays(model), config)


def load_backbone(path) -> tuple[CrossTransformerBackbone, AttributeSchema, dict]:
    config, arrays = load_checkpoint(path)
    if config.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    bcfg = _backbone_config_load(config["backbone"])
    model = CrossTransformerBackbone(bcfg)
    load_into_module(model, arrays)
    schema = AttributeSchema.from_json_dict(config["schema"])
    return model, schema, config


def run_gen_data(cfg: dict, schema: AttributeSchema, out_dir) -> Manifest:
    out_dir = Path(out_dir)
    synth_cfg = SynthConfig(schema=schema, **synth_config_kwargs(cfg))
    manifest = generate_dataset(synth_cfg, out_dir)
    save_schema(schema, out_dir / "schema.json")
    return manifest


def _load_data(data_dir) -> tuple[AttributeSchema, Manifest, Path]:
    data_dir = Path(data_dir)
    schema = load_schema(data_dir / "schema.json")
    manifest = load_manifest(data_dir / "manifest.jsonl", schema)
    return schema, manifest, data_dir


def run_train_par(cfg: dict, data_dir, out_ckpt, report_dir=None):
    """Train the recognizer on the train split; returns (ckpt path, curve)."""
    schema, manifest, data_dir = _load_data(data_dir)
    images, labels, _, _ = load_split_arrays(manifest, data_dir, "train")
    bcfg = backbone_config_from(cfg, tuple(manifest.image_hw))
    if bcfg.n_attr != schema.n_attr:
        raise ConfigError(
            f"backbone.n_attr={bcfg.n_attr} but the dataset schema has "
            f"{schema.n_attr} attributes"
        )
    torch.manual_seed(int(cfg["seed"]))
    model = CrossTransformerBackbone(bcfg)
    state, curve = train_par(model, images, labels, par_train_config_from(cfg))
    save_backbone(out_ckpt, model, schema, seed=int(cfg["seed"]))
    if report_dir is not None:
        write_loss_curve(report_dir, curve, name="par_loss")
    return Path(out_ckpt), curve


def _eval_splits(manifest: Manifest, data_dir: Path, split: str):
    names = ["gallery", "query"] if split == "test" else [split]
    images, labels = [], []
    for name in names:
        try:
            imgs, labs, _, _ = load_split_arrays(manifest, data_dir, name)
        except ManifestError:
            continue
        images.append(imgs)
        labels.append(labs)
    if not images:
        raise ManifestError(f"no records in split(s) {names}")
    return np.concatenate(images), np.concatenate(labels)


def run_eval_par(cfg: dict, ckpt, data_dir, split: str = "test", out_path=None) -> dict:
    model, schema, _ = load_backbone(ckpt)
    freeze(model)
    _, manifest, data_dir = _load_data(data_dir)
    images, labels = _eval_splits(manifest, data_dir, split)
    report = evaluate_par(model, images, labels, batch_size=int(cfg["eval"]["batch_size"]))
    report["split"] = split
    report["config"] = cfg
    validate_report(report, "par")
    if out_path is not None:
        write_json_report(out_path, report)
        write_per_attribute_csv(
            Path(out_path).with_suffix(".per_attribute.csv"),
            [a.name for a in schema.attributes],
            report["per_attribute"],
        )
    return report


def run_train_ret(cfg: dict, data_dir, par_ckpt, out_heads, report_dir=None):
    """Margin-train the retrieval adapters against a frozen recognizer."""
    schema, manifest, data_dir = _load_data(data_dir)
    model, ckpt_schema, _ = load_backbone(par_ckpt)
    if ckpt_schema.schema_hash() != schema.schema_hash():
        raise ConfigError("checkpoint schema does not match the dataset schema")
    freeze(model)
    backbone_hash = module_hash(model)
    images, labels, _, _ = load_split_arrays(manifest, data_dir, "train")
    features = backbone_feature_matrix(model, images)
    heads_cfg = heads_config_from(cfg, model.cfg.feature_dim, schema.n_attr)
    torch.manual_seed(int(cfg["seed"]) + 1)
    heads = RetrievalHeads(heads_cfg)
    provider = HashEmbeddingProvider(
        heads_cfg.dim_w, seed=int(cfg["ret_train"]["provider_seed"])
    )
    table, curve = train_ret(
        heads, features, labels, schema, provider, ret_train_config_from(cfg)
    )
    if module_hash(model) != backbone_hash:
        raise CheckpointError("frozen backbone changed during retrieval training")
    save_heads(
        out_heads,
        heads,
        backbone_hash,
        extra={
            "provider_seed": int(cfg["ret_train"]["provider_seed"]),
            "n_categories": table.n_categories,
        },
    )
    if report_dir is not None:
        write_loss_curve(report_dir, curve, name="ret_loss")
    return Path(out_heads), curve


def _gallery_index(model, heads, manifest, data_dir):
    images, labels, _, paths = load_split_arrays(manifest, data_dir, "gallery")
    features = backbone_feature_matrix(model, images)
    with torch.no_grad():
        emb = heads.f_vis(torch.as_tensor(features)).numpy()
    return build_index(emb, paths, labels)


def run_eval_ret(
    cfg: dict, par_ckpt, heads_path, data_dir, query_mode=None, out_path=None
) -> dict:
    mode = query_mode or cfg["eval"]["query_mode"]
    schema, manifest, data_dir = _load_data(data_dir)
    model, _, _ = load_backbone(par_ckpt)
    freeze(model)
    heads, heads_cfg = load_heads(heads_path, expect_backbone_hash=module_hash(model))
    freeze(heads)
    provider = HashEmbeddingProvider(
        heads.cfg.dim_w, seed=int(heads_cfg.get("provider_seed", 0))
    )
    index = _gallery_index(model, heads, manifest, data_dir)
    subset = bool(cfg["eval"]["subset_match"])
    results = []
    with torch.no_grad():
        for cat, attrs in sorted(manifest.categories("query").items()):
            qvec = query_vector(schema, provider, heads, attrs, mode=mode).numpy()
            results.append(
                search(
                    index,
                    qvec,
                    k=10,
                    query_id=cat,
                    query_attrs=attrs,
                    subset_match=subset,
                )
            )
    report = evaluate_retrieval(results)
    report["query_mode"] = mode
    report["config"] = cfg
    validate_report(report, "ret")
    if out_path is not None:
        write_json_report(out_path, report)
    return report


def run_search(
    cfg: dict, par_ckpt, heads_path, data_dir, queries_path, k: int, out_path
) -> int:
    """Rank the gallery for each query line; returns the query count."""
    mode = cfg["eval"]["query_mode"]
    schema, manifest, data_dir = _load_data(data_dir)
    model, _, _ = load_backbone(par_ckpt)
    freeze(model)
    heads, heads_cfg = load_heads(heads_path, expect_backbone_hash=module_hash(model))
    freeze(heads)
    provider = HashEmbeddingProvider(
        heads.cfg.dim_w, seed=int(heads_cfg.get("provider_seed", 0))
    )
    index = _gallery_index(model, heads, manifest, data_dir)
    queries_path = Path(queries_path)
    if not queries_path.exists():
        raise ConfigError(f"query file not found: {queries_path}")
    lines = queries_path.read_text(encoding="utf-8").splitlines()
    out_lines = []
    with torch.no_grad():
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                bits = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{queries_path}:{lineno}: bad query line: {exc}")
            qvec = query_vector(schema, provider, heads, bits, mode=mode).numpy()
            result = search(index, qvec, k=k, query_id=lineno - 1)
            out_lines.append(
                json.dumps(
                    {
                        "query_id": lineno - 1,
                        "topk": [[img, round(score, 8)] for img, score in result.topk()],
                    },
                    sort_keys=True,
                )
            )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    return len(out_lines)
