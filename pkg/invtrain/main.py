"""This module contains the main FastAPI application."""


from fastapi import FastAPI
from fastapi.exceptions import HTTPException, RequestValidationError

from invtrain.config.logging import configure_logging
from invtrain.exceptions import (
    InvTrainError,
    general_exception_handler,
    http_exception_handler,
    invtrain_exception_handler,
    validation_exception_handler,
)
from invtrain.router.model_router import model_router
from invtrain.router.scm_router import scm_router

configure_logging()

app = FastAPI(
    title="invtrain API",
)

# Routers
app.include_router(scm_router, tags=["Causal checks"])
app.include_router(model_router, tags=["Model"])

# Exception Handlers
app.add_exception_handler(Exception, general_exception_handler)
app.add_exception_handler(HTTPException, http_exception_handler)
app.add_exception_handler(RequestValidationError, validation_exception_handler)
app.add_exception_handler(InvTrainError, invtrain_exception_handler)
