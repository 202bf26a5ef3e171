# API Routes Package
from .plans import router as plans_router
from .profiles import router as profiles_router

__all__ = [
    "plans_router",
    "profiles_router",
]
