"""This module provides the served checkpoint to the API."""

from fastapi import HTTPException

from invtrain.config.settings import get_settings
from invtrain.exceptions import CheckpointError
from invtrain.services import load_model


def get_model():
    """This function returns the network named by INVTRAIN_CHECKPOINT, with its header."""
    path = get_settings().INVTRAIN_CHECKPOINT
    if not path:
        raise HTTPException(status_code=503, detail="No checkpoint is configured; set INVTRAIN_CHECKPOINT.")
    try:
        return load_model(path)
    except CheckpointError as exc:
        raise HTTPException(status_code=503, detail=str(exc)) from exc
