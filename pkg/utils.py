import json
import os
from typing import Any, Dict, List, Optional

import numpy as np

from array_normal import SeparableCovariance
from tensor_core import ParameterError, ShapeError, as_tensor, check_dims, vec

TENSOR_ORDER = "col-major"


def parse_dims(text: str) -> List[int]:
    """
    Parse a comma separated list of mode dimensions such as "4,4,4".

    Args:
        text (str): Dimensions separated by commas.

    Returns:
        List[int]: Positive integer dimensions.
    """
    try:
        dims = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ShapeError(f"could not parse dimensions from {text!r}") from e
    return list(check_dims(dims))


def parse_weights(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ParameterError(f"could not parse weights from {text!r}") from e


def _ensure_parent(path: str) -> None:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)


def _write_json(payload: Dict[str, Any], path: str) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def _read_json(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ParameterError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ParameterError(f"{path} must hold a JSON object")
    return payload


def tensor_to_dict(X: np.ndarray) -> Dict[str, Any]:
    """Tensor payload {"dims", "order", "data"} with the data in column-major order."""
    return {"dims": list(X.shape), "order": TENSOR_ORDER, "data": vec(X).tolist()}


def tensor_from_dict(payload: Dict[str, Any]) -> np.ndarray:
    """
    Rebuild a tensor from its payload.

    Args:
        payload (Dict): Object with "dims", "order" and "data" keys.

    Returns:
        np.ndarray: Float64 tensor of shape dims.
    """
    try:
        dims, order, data = payload["dims"], payload["order"], payload["data"]
    except KeyError as e:
        raise ParameterError(f"tensor payload is missing {e}") from e
    if order != TENSOR_ORDER:
        raise ParameterError(f"unsupported tensor order {order!r}, expected {TENSOR_ORDER!r}")
    if not isinstance(dims, list) or not all(isinstance(d, int) and not isinstance(d, bool) for d in dims):
        raise ShapeError(f"tensor dims must be a list of integers, got {dims!r}")
    if not isinstance(data, list):
        raise ParameterError("tensor data must be a flat list of numbers")
    try:
        return as_tensor(data, dims)
    except (ParameterError, ShapeError):
        raise
    except (TypeError, ValueError) as e:
        raise ParameterError(f"tensor payload has malformed values: {e}") from e


def save_tensor(X: np.ndarray, path: str) -> None:
    """
    Write a tensor as a .tnsr.json file.

    Floats go through json's shortest repr, so they read back exactly.

    Args:
        X (np.ndarray): Tensor to write.
        path (str): Destination file.
    """
    _write_json(tensor_to_dict(X), path)


def load_tensor(path: str) -> np.ndarray:
    return tensor_from_dict(_read_json(path))


def save_covariance(cov: SeparableCovariance, path: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
    """
    Write a SeparableCovariance as JSON.

    Args:
        cov (SeparableCovariance): Covariance to write.
        path (str): Destination file.
        diagnostics (Dict): Optional diagnostics block stored next to it.
    """
    payload = cov.to_dict()
    if diagnostics is not None:
        payload["diagnostics"] = diagnostics
    _write_json(payload, path)


def load_covariance(path: str) -> SeparableCovariance:
    """Read a SeparableCovariance JSON file; the invariants are checked on load."""
    return SeparableCovariance.from_dict(_read_json(path))


def load_json(path: str) -> Dict[str, Any]:
    return _read_json(path)
