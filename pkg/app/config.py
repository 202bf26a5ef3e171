from pydantic_settings import BaseSettings
from typing import List
from pydantic import Field


class Settings(BaseSettings):
    # FastAPI Configuration
    app_name: str = Field("DiffusionPipe Planner", alias="APP_NAME")
    debug: bool = Field(False, alias="DEBUG")
    host: str = Field("0.0.0.0", alias="HOST")
    port: int = Field(8000, alias="PORT")

    # CORS Configuration
    allowed_origins: List[str] = Field(["http://localhost:3000", "http://localhost:5173", "http://localhost:8080"], alias="ALLOWED_ORIGINS")

    # Logging
    log_level: str = Field("INFO", alias="LOG_LEVEL")

    # Bubble filling
    bubble_min_ms: float = Field(10.0, alias="BUBBLE_MIN_MS")
    fill_overhead_ms: float = Field(0.0, alias="FILL_OVERHEAD_MS")

    # Grid search
    default_microbatches: List[int] = Field([1, 2, 4, 8, 16], alias="DEFAULT_MICROBATCHES")
    equal_replication: bool = Field(True, alias="EQUAL_REPLICATION")
    search_workers: int = Field(1, alias="SEARCH_WORKERS")

    # Brute-force oracle guards
    oracle_max_layers: int = Field(10, alias="ORACLE_MAX_LAYERS")
    oracle_max_stages: int = Field(4, alias="ORACLE_MAX_STAGES")
    oracle_max_devices: int = Field(6, alias="ORACLE_MAX_DEVICES")

    class Config:
        env_file = ".env"
        case_sensitive = False

    @property
    def bubble_min_seconds(self) -> float:
        return self.bubble_min_ms / 1000.0

    @property
    def fill_overhead_seconds(self) -> float:
        return self.fill_overhead_ms / 1000.0


# Create settings instance
settings = Settings()
