"""Annotation pipeline: model clients, checkpointing, the four levels and
conversions of existing datasets into grounded-caption records."""
from .clients import Clients, MockClient, ServiceClient, clients_from_env
from .levels import PipelineConfig, read_manifest, run_all, run_level, validate_grand_record
from .store import CheckpointStore, StageState
