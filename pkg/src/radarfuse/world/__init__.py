from .camera import default_cameras, projected_rect, render_camera_features
from .radar import (
    SweepScene,
    accumulate_sweep_arrays,
    accumulate_sweeps,
    compensate_doppler,
    doppler_radial_velocity,
    simulate_frame_radar,
    simulate_sweep,
    sweep_scene,
)
from .scene import (
    MAP_TEMPLATES,
    RadarSensorConfig,
    ScenarioConfig,
    ScenarioError,
    WeatherNoise,
    build_world,
    generate_scene,
)
