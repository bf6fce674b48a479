from .cli import MetricsLog, Script, main, run_script  # noqa: F401
