"""Memory-efficient fine-tuning of a toy diffusion transformer by block skipping.

Modules: ``autodiff`` (tensor engine), ``model`` (toy DiT), ``lora``,
``patches`` (timestep-aware crops), ``schedule`` (counter-based step
derivation), ``skip`` (residual precompute and replay), ``blockselect``,
``costmodel``, ``train``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
