"""Token marks and a temporal region guide head on a small numpy autodiff core.

Modules, bottom-up: ``numerics`` (tensors, gradients, Adam), ``region``
(prompts, coverage, soft labels), ``token_mark`` (mark bank and injection),
``guide_head`` (per-token mark classifier and combined loss), ``backbone``
(toy vision encoder and causal LM), ``synth`` (moving-shapes QA data),
then ``model``, ``training``, ``checkpoint`` and ``cli``.
"""

__version__ = "0.1.0"
