"""Glue from a RunConfig to model-ready data."""
from __future__ import annotations

from pathlib import Path

from .config import RunConfig
from .data import EncodedDataset, PreparedData, encode_records, generate, ingest, prepare
from .spectral import LandmarkLayout, ibug68


def layout_for(cfg: RunConfig) -> LandmarkLayout:
    if cfg.data.layout:
        return LandmarkLayout.from_file(cfg.data.layout)
    return ibug68(cfg.data.synthetic.landmark_arity)


def load_records(cfg: RunConfig):
    """Synthetic clips, or the validated records of a CSV directory (rejections are dropped)."""
    if cfg.data.source == "synthetic":
        return generate(cfg.data.synthetic, layout_for(cfg)), []
    res = ingest(Path(cfg.data.source), cfg.data.conf_threshold)
    return res.records, res.rejections


def encode(cfg: RunConfig) -> EncodedDataset:
    records, _ = load_records(cfg)
    attrs = sorted({s.attribute or s.name for s in cfg.streams})
    return encode_records(records, cfg.data.K, cfg.data.conf_threshold, layout_for(cfg), attrs)


def prepared(cfg: RunConfig, enc: EncodedDataset | None = None) -> PreparedData:
    enc = enc if enc is not None else encode(cfg)
    return prepare(enc, cfg.stream_spaces(), cfg.data.split_seed)
