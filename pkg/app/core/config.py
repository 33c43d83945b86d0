from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    project_name: str = 'adsp-lab'
    project_description: str = 'Parameter-synchronization laboratory'
    project_version: str = '0.1.0'

    # Artifacts
    output_dir: str = 'runs'

    # Run cache settings
    run_cache_db: str | None = None
    run_cache_ttl_seconds: int = 7 * 24 * 3600  # default one week

    # Real-time runtime: wall seconds per virtual second
    realtime_time_scale: float = 0.01

    # Sweeps
    sweep_workers: int = 1

    # Commit-rate search
    search_budget: int = 10
    commit_epsilon: int = 1

    model_config = SettingsConfigDict(env_prefix='ADSP_', env_file='.env', extra='ignore')


config = Settings()
