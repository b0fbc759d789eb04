from trainprove.service.app import create_app
from trainprove.service.schemas import Mode, PredictRequest, PredictResponse

__all__ = ["create_app", "Mode", "PredictRequest", "PredictResponse"]
