from .params import ModelConfig, ModelFileError, ModelParams
from .network import attention_scores, distributions, embed, forward, loss_and_grad
from .infer import InferenceEngine, quantize_dist, quantize_dists

__all__ = ["ModelConfig", "ModelFileError", "ModelParams", "attention_scores", "distributions",
           "embed", "forward", "loss_and_grad", "InferenceEngine", "quantize_dist",
           "quantize_dists"]
