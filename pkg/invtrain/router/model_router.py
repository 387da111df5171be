"""This module contains the endpoints serving a trained checkpoint."""

from fastapi import APIRouter, Depends
from fastapi_restful.cbv import cbv

from invtrain import schemas
from invtrain.config.checkpoint import get_model
from invtrain.services import perform_prediction

model_router = APIRouter()


@cbv(model_router)
class ModelRouter:
    """Router for checkpoint inspection and inference."""

    model: tuple = Depends(get_model)

    @model_router.get("/model", summary="Describe the served checkpoint.")
    def model_info(self) -> schemas.CheckpointHeader:
        """Return the checkpoint header: layout, classes and training config."""

        _, header = self.model
        return header

    @model_router.post("/predict", summary="Classify one chip.")
    def predict(self, request: schemas.PredictRequest) -> schemas.PredictResponse:
        """Predict the label of a chip and return its class activation mask."""

        net, _ = self.model
        return perform_prediction(net, request.image)
