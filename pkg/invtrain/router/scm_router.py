"""This module contains the causal-check endpoint."""

from fastapi import APIRouter
from fastapi_restful.cbv import cbv

from invtrain import schemas
from invtrain.services import perform_scm_check

scm_router = APIRouter()


@cbv(scm_router)
class ScmRouter:
    """Router for the structural causal model checks."""

    @scm_router.post("/scm/check", summary="Check a backdoor adjustment set on a discrete DAG.")
    def scm_check(self, request: schemas.ScmCheckRequest) -> schemas.ScmReport:
        """Compare the backdoor estimate with the interventional oracle and the observational conditional."""

        return perform_scm_check(
            graph=request.graph,
            treatment=request.treatment,
            outcome=request.outcome,
            adjust=request.adjust,
            value=request.value,
        )
