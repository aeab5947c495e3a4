"""FastAPI service exposing scene generation, task inference and sampling."""

from .app import create_app

__all__ = ["create_app"]
