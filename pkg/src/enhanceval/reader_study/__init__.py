from .service import create_app, create_app_from_store
from .store import ReaderStudyStore

__all__ = ["ReaderStudyStore", "create_app", "create_app_from_store"]
