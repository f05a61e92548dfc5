"""cfgpilot: learned per-step guidance control for toy diffusion."""
