"""Attention-guided counterfactual image generation for VQA models.

Given an (image, question) pair and a trainable VQA model, the pipeline
produces a minimally edited, realistic counterfactual image restricted to
the question-critical region that flips the model's answer, along with the
evaluation metrics and human-study export tooling built around it.
"""

__version__ = "0.1.0"
