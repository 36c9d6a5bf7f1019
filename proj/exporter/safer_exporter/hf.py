"""Hugging Face transformers backend for the exporter."""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .export import ExportError


class HFModel:
    def __init__(self, model_id: str, device: Optional[str] = None):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise ExportError("the hf backend needs torch and transformers installed") from e
        self._torch = torch
        if device is None:
            device = "cuda" if torch.cuda.is_available() else "cpu"
        if device.startswith("cuda") and not torch.cuda.is_available():
            raise ExportError(f"device {device} unavailable")
        self.device = torch.device(device)
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_id)
            self.model = AutoModel.from_pretrained(model_id).to(self.device).eval()
        except (OSError, ValueError) as e:
            raise ExportError(f"cannot load model {model_id}: {e}") from e
        cfg = self.model.config
        self.depth = int(getattr(cfg, "num_hidden_layers", 0) or getattr(cfg, "n_layer", 0))
        self.hidden_size = int(getattr(cfg, "hidden_size", 0) or getattr(cfg, "n_embd", 0))
        limits = [getattr(cfg, "max_position_embeddings", None), getattr(cfg, "n_positions", None),
                  self.tokenizer.model_max_length]
        self.max_length = int(min(x for x in limits if isinstance(x, int) and x > 0))
        self.template = "chat" if getattr(self.tokenizer, "chat_template", None) else "raw"
        self._pad = self.tokenizer.pad_token_id
        if self._pad is None:
            self._pad = self.tokenizer.eos_token_id or 0

    def tokenize(self, text: str) -> List[int]:
        return list(self.tokenizer(text, add_special_tokens=self.template == "raw")["input_ids"])

    def join(self, prompt: str, response: str) -> str:
        if self.template == "chat":
            return self.tokenizer.apply_chat_template(
                [{"role": "user", "content": prompt}, {"role": "assistant", "content": response}], tokenize=False)
        return prompt + "\n" + response

    def hidden_states(self, batch: Sequence[Sequence[int]], layer: int) -> List[np.ndarray]:
        torch = self._torch
        width = max(len(s) for s in batch)
        ids = torch.full((len(batch), width), self._pad, dtype=torch.long)
        mask = torch.zeros((len(batch), width), dtype=torch.long)
        for i, s in enumerate(batch):
            ids[i, :len(s)] = torch.tensor(list(s), dtype=torch.long)
            mask[i, :len(s)] = 1
        with torch.no_grad():
            out = self.model(input_ids=ids.to(self.device), attention_mask=mask.to(self.device),
                             output_hidden_states=True)
        # hidden_states[0] is the embedding output; [layer] follows block `layer`.
        h = out.hidden_states[layer].float().cpu().numpy()
        return [h[i, :len(s)] for i, s in enumerate(batch)]
