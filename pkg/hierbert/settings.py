from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv

load_dotenv()


class Settings(BaseSettings):
    """Настройки процесса из переменных окружения HIERBERT_* или .env"""

    model_config = SettingsConfigDict(env_prefix="HIERBERT_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    output_dir: str = "runs"


settings = Settings()
