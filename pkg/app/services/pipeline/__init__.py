# app/services/pipeline/__init__.py
from .runner import execute_step  # noqa: F401
