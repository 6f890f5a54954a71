"""Launch the mission API server for the frontend contract test."""

import sys

import uvicorn

from subterra.runner import ScenarioConfig
from subterra.server import create_app

if __name__ == "__main__":
    scenario_path, run_dir, port = sys.argv[1], sys.argv[2], int(sys.argv[3])
    app = create_app(ScenarioConfig.from_yaml(scenario_path), run_dir)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="error")
