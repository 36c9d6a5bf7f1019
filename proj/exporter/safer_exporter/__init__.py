"""Residual-stream activation export in the shard format read by the C++ toolkit."""

from .export import (
    ExportError,
    ExportJob,
    HiddenStateModel,
    PreferenceTriplet,
    export_pretrain,
    export_preference,
    read_triplets,
    write_triplets,
)
from .shard import Manifest, Record, ShardWriter, read_shard, write_shard

__all__ = [
    "ExportError",
    "ExportJob",
    "HiddenStateModel",
    "Manifest",
    "PreferenceTriplet",
    "Record",
    "ShardWriter",
    "export_pretrain",
    "export_preference",
    "read_shard",
    "read_triplets",
    "write_shard",
    "write_triplets",
]
