"""Optional adapter for promptable segmentation models from transformers.

Loads lazily so the service has no hard dependency on torch; any
checkpoint compatible with SamModel/SamProcessor works (given local
weights). Point prompts arrive as (row, col, positive) tuples.
"""

from __future__ import annotations

import numpy as np


class TransformersSamModel:
    name = "transformers-sam"

    def __init__(self, checkpoint):
        if not checkpoint:
            raise ValueError("transformers-sam needs a local checkpoint path")
        try:
            import torch  # noqa: F401
            from transformers import SamModel, SamProcessor
        except ImportError as exc:
            raise RuntimeError("transformers/torch are not installed") from exc
        self.processor = SamProcessor.from_pretrained(checkpoint)
        self.model = SamModel.from_pretrained(checkpoint)
        self.model.eval()

    def predict(self, image, points):
        import torch

        # transformers expects (x, y) = (col, row) prompt coordinates
        input_points = [[[c, r] for r, c, p in points if p]]
        inputs = self.processor(image, input_points=input_points, return_tensors="pt")
        with torch.no_grad():
            out = self.model(**inputs)
        masks = self.processor.image_processor.post_process_masks(
            out.pred_masks.sigmoid(), inputs["original_sizes"], inputs["reshaped_input_sizes"],
            binarize=False,
        )[0][0]
        scores = out.iou_scores[0, 0]
        best = int(scores.argmax())
        return masks[best].numpy().astype(np.float64), float(scores[best])
