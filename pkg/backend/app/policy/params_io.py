from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from app.policy.model import LAYOUT_VERSION, ModelConfig, ParameterLayout, PolicyParameters


MAGIC = b"BDPOPARM"
_HEADER = struct.Struct("<8sIQ")  # magic, layout version, vector length


class ParamsFormatError(ValueError):
    """A parameter blob or model-config document that cannot be read back."""


class ModelConfigDTO(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(..., ge=2)
    embed_dim: int = Field(..., ge=1)
    context_window: int = Field(..., ge=1)
    hidden_dim: int = Field(..., ge=1)
    seed: int = 0
    bos_id: int = Field(default=0, ge=0)
    init_scale: float = Field(default=0.5, gt=0)


def _config_to_dto(c: ModelConfig) -> ModelConfigDTO:
    return ModelConfigDTO(
        vocab_size=c.vocab_size,
        embed_dim=c.embed_dim,
        context_window=c.context_window,
        hidden_dim=c.hidden_dim,
        seed=c.seed,
        bos_id=c.bos_id,
        init_scale=c.init_scale,
    )


def _dto_to_config(d: ModelConfigDTO) -> ModelConfig:
    return ModelConfig(
        vocab_size=d.vocab_size,
        embed_dim=d.embed_dim,
        context_window=d.context_window,
        hidden_dim=d.hidden_dim,
        seed=d.seed,
        bos_id=d.bos_id,
        init_scale=d.init_scale,
    )


def config_path_for(params_path: Path) -> Path:
    """`model.params` keeps its config beside it as `model.json`."""
    return params_path.with_suffix(".json")


def save_model_config(path: Path, config: ModelConfig) -> None:
    path.write_text(_config_to_dto(config).model_dump_json(indent=2) + "\n", encoding="utf-8")


def load_model_config(path: Path) -> ModelConfig:
    try:
        dto = ModelConfigDTO.model_validate_json(path.read_text(encoding="utf-8"))
        return _dto_to_config(dto)
    except FileNotFoundError:
        raise
    except ValueError as e:
        raise ParamsFormatError(f"{path}: invalid model config: {e}") from e


def encode_params(params: PolicyParameters) -> bytes:
    values = params.values.detach().numpy().astype("<f8")
    return _HEADER.pack(MAGIC, LAYOUT_VERSION, values.size) + values.tobytes()


def decode_params(data: bytes, config: ModelConfig) -> PolicyParameters:
    if len(data) < _HEADER.size:
        raise ParamsFormatError("parameter blob is shorter than its header")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParamsFormatError("not a parameter blob (bad magic)")
    if version != LAYOUT_VERSION:
        raise ParamsFormatError(f"unsupported layout version {version}")
    expected = ParameterLayout.for_config(config).size
    if length != expected:
        raise ParamsFormatError(f"blob holds {length} values, model config expects {expected}")
    if len(data) != _HEADER.size + 8 * length:
        raise ParamsFormatError("parameter blob is truncated or has trailing bytes")
    arr = np.frombuffer(data, dtype="<f8", count=length, offset=_HEADER.size).astype(np.float64)
    try:
        return PolicyParameters(config=config, values=torch.from_numpy(arr))
    except ValueError as e:
        raise ParamsFormatError(str(e)) from e


def save_params(path: Path, params: PolicyParameters) -> None:
    """Write the blob and its model-config document."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(params))
    save_model_config(config_path_for(path), params.config)


def load_params(path: Path) -> PolicyParameters:
    config = load_model_config(config_path_for(path))
    return decode_params(path.read_bytes(), config)
