from .export import ExportError, convert, export, export_map, load_checkpoint  # noqa: F401
