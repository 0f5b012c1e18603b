"""JSON config loading shared by the CLI commands and the bench harness."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

from .core import CategoricalModel, derive_draft, load_model, make_model, speculative_decode, autoregressive_decode
from .core.rng import session_rng


class ConfigError(ValueError):
    pass


def read_config(path: str | Path | None) -> tuple[dict[str, Any], Path | None]:
    if path is None:
        return {}, None
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc, path.parent


def _model(spec: Any, base: Path | None) -> CategoricalModel:
    if isinstance(spec, str):
        path = Path(spec)
        if base is not None and not path.is_absolute():
            path = base / path
        try:
            return load_model(path)
        except FileNotFoundError as exc:
            raise ConfigError(f"model file {path} not found") from exc
    if not isinstance(spec, Mapping):
        raise ConfigError(f"cannot read a model from {spec!r}")
    return make_model(spec)


def resolve_models(doc: Mapping[str, Any], base: Path | None) -> tuple[CategoricalModel, CategoricalModel]:
    """Target from ``target``; draft from ``draft`` or derived with ``epsilon``."""
    if "target" not in doc:
        raise ConfigError("config needs a 'target' model (inline spec or path)")
    target = _model(doc["target"], base)
    if doc.get("draft") is not None:
        draft = _model(doc["draft"], base)
    elif "epsilon" in doc:
        draft = derive_draft(target, float(doc["epsilon"]))
    else:
        raise ConfigError("config needs 'draft' or 'epsilon'")
    if draft.vocab_size != target.vocab_size:
        raise ConfigError("draft and target vocabularies differ")
    return target, draft


def require(doc: Mapping[str, Any], *keys: str) -> None:
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ConfigError(f"missing config field(s): {', '.join(missing)}")


def decode_params(doc: Mapping[str, Any]) -> dict[str, Any]:
    require(doc, "d", "max_tokens")
    return {
        "prompt": [int(t) for t in doc.get("prompt", [0])],
        "d": int(doc["d"]),
        "k": int(doc.get("k", 1)),
        "max_tokens": int(doc["max_tokens"]),
        "seed": int(doc.get("seed", 0)),
        "greedy": bool(doc.get("greedy", False)),
    }


def reference_run(target: CategoricalModel, draft: CategoricalModel, params: Mapping[str, Any], tag: int = 1) -> dict[str, Any]:
    """Single-process decode with the streams a networked session ``tag`` would use."""
    seed = params["seed"]
    spec = speculative_decode(
        target, draft, params["prompt"], params["d"], params["k"], params["max_tokens"],
        session_rng(seed, tag, "target"), draft_rng=session_rng(seed, tag, "draft"), greedy=params["greedy"],
    )
    plain = autoregressive_decode(
        target, params["prompt"], params["max_tokens"], session_rng(seed, tag, "target"), greedy=params["greedy"]
    )
    hist: dict[int, int] = {}
    for length in spec.accept_lengths:
        hist[length] = hist.get(length, 0) + 1
    return {
        "tag": tag,
        "seed": seed,
        "speculative": spec.generated,
        "autoregressive": plain.generated,
        "accept_lengths": spec.accept_lengths,
        "accept_histogram": {str(k): hist[k] for k in sorted(hist)},
        "mean_accept_len": sum(spec.accept_lengths) / len(spec.accept_lengths),
        "rounds": spec.rounds,
    }
