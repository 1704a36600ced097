"""Few-shot image-identity recognition toolkit, CPU only.

Reverse-mode autodiff, residual convolutional classifiers, a
pretrain/freeze/fine-tune transfer workflow, class-balanced splits, and
occlusion-sweep saliency maps.
"""

from .autodiff import Tensor, backward, grad_check, no_grad, tensor_new

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "tensor_new"]
