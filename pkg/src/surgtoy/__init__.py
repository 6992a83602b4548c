"""Desk-scale surgical video-language pipeline: masked tube pretraining, contrastive
alignment, temporal sequence assembly and a task-routed adapter ensemble."""

__version__ = "0.1.0"
