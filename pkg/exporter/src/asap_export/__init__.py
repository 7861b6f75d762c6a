from .export import ExportError, ExportJob, export, read_turns, write_store

__all__ = ["ExportError", "ExportJob", "export", "read_turns", "write_store"]
