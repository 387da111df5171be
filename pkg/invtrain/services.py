"""This module contains the services shared by the HTTP API and the command line."""

import logging
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from invtrain import autodiff as ad
from invtrain.exceptions import ShapeMismatchError
from invtrain.models import Network, cam_mask, load_checkpoint
from invtrain.schemas import CheckpointHeader, DagDocument, PredictResponse, ScmReport
from invtrain.scm import CausalDag, check_report

logger = logging.getLogger(__name__)


def perform_scm_check(
    graph: DagDocument, treatment: str, outcome: str, adjust: Sequence[str], value: Optional[int] = None
) -> ScmReport:
    """Backdoor verdict, adjusted and oracle distributions, and the confounding gap."""
    dag = CausalDag.from_document(graph)
    return ScmReport.model_validate(check_report(dag, treatment, outcome, adjust, value))


@lru_cache
def load_model(path: str) -> tuple[Network, CheckpointHeader]:
    """Checkpoints are read once per path and process."""
    logger.info("loading checkpoint %s", path)
    return load_checkpoint(path)


def perform_prediction(net: Network, image: Sequence[Sequence[float]]) -> PredictResponse:
    """Label, logits and class activation mask of one single-channel chip."""
    try:
        chip = np.asarray(image, dtype=np.float64)
    except ValueError as exc:
        raise ShapeMismatchError("the image rows must all have the same length") from exc
    if chip.ndim != 2:
        raise ShapeMismatchError(f"expected a {net.side}x{net.side} image")
    with ad.no_grad():
        result = net.forward(chip[None, :, :])
    mask = cam_mask(net, result.feature_map, result.logits)
    return PredictResponse(
        label=int(np.argmax(result.logits.data)),
        logits=result.logits.data.tolist(),
        mask=mask.data.tolist(),
    )
