from pydantic_settings import BaseSettings
from typing import List
import os


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Output
    OUTPUT_ROOT: str = "runs"
    MATRIX_CACHE_DIR: str = ""  # empty disables the system matrix cache

    # Solver threads (0 = machine parallelism)
    THREADS: int = 0

    # Logging
    LOG_LEVEL: str = "INFO"

    # CORS
    ALLOWED_ORIGINS: str = "http://localhost:3000,http://localhost:8000"

    # Environment
    ENVIRONMENT: str = "development"

    @property
    def allowed_origins_list(self) -> List[str]:
        """Convert comma-separated ALLOWED_ORIGINS to list."""
        return [origin.strip() for origin in self.ALLOWED_ORIGINS.split(",")]

    @property
    def thread_count(self) -> int:
        """Resolved solver thread count."""
        return self.THREADS if self.THREADS > 0 else (os.cpu_count() or 1)

    class Config:
        env_file = ".env"
        case_sensitive = True


settings = Settings()
