import io
import os
from datetime import datetime

import numpy as np
import soundfile as sf
from dotenv import load_dotenv
from flask import Flask, jsonify, request
from flask_cors import CORS

from config import load_config
from model import count_macs
from stft_frontend import SAMPLE_RATE
from trainer import config_sidecar, infer_arrays, load_model

# Load environment variables
load_dotenv()

app = Flask(__name__)

# Enable CORS for all routes
CORS(app, origins=["*"], methods=["GET", "POST", "OPTIONS"])


class UploadError(ValueError):
    """Raised for missing or malformed WAV uploads"""


class ModelManager:
    """Loads the checkpoint named by RTSDOA_CHECKPOINT and runs inference"""

    def __init__(self, checkpoint=None, config_path=None):
        self.checkpoint = checkpoint or os.getenv("RTSDOA_CHECKPOINT")
        self.config_path = config_path or os.getenv("RTSDOA_CONFIG")
        if not self.checkpoint:
            raise ValueError("RTSDOA_CHECKPOINT environment variable is required")
        config = None
        if self.config_path:
            config = load_config(self.config_path, use_environment=False)
        self.model, self.config = load_model(self.checkpoint, config)
        self.loaded_at = datetime.now().isoformat()

    def describe(self):
        model_config = self.config.model
        return {
            "checkpoint": os.path.basename(self.checkpoint),
            "config": self.config_path or config_sidecar(self.checkpoint),
            "parameters": self.model.count_parameters(),
            "macs_per_second": count_macs(model_config),
            "mics": model_config.mics,
            "input_mode": model_config.input_mode,
            "use_enhancement": model_config.use_enhancement,
            "use_speaker_features": model_config.use_speaker_features,
            "causal_attention": model_config.causal_attention,
            "loaded_at": self.loaded_at,
        }

    def infer(self, mixture, anchor):
        return infer_arrays(self.model, mixture, anchor)


model_manager = None


def get_model_manager(reload=False):
    """Get the shared model manager"""
    global model_manager
    if model_manager is None or reload:
        model_manager = ModelManager()
    return model_manager


# Initialize model manager
try:
    if os.getenv("RTSDOA_CHECKPOINT"):
        model_manager = get_model_manager()
        print("✅ Model loaded successfully!")
    else:
        print("⚠️ RTSDOA_CHECKPOINT not set; /infer is unavailable until a model is loaded")
except Exception as e:
    print(f"❌ Failed to load model: {e}")
    model_manager = None


def read_upload(field, channels):
    upload = request.files.get(field)
    if upload is None:
        raise UploadError(f"Missing required file: {field}")
    try:
        data, rate = sf.read(io.BytesIO(upload.read()), dtype="float64", always_2d=True)
    except Exception as e:
        raise UploadError(f"Could not read {field} as audio: {e}") from None
    if rate != SAMPLE_RATE:
        raise UploadError(f"{field} must be sampled at {SAMPLE_RATE} Hz, got {rate}")
    if data.shape[1] != channels:
        raise UploadError(f"{field} must have {channels} channel(s), got {data.shape[1]}")
    return data.T


@app.route('/')
def home():
    return "RTS-DOA inference service is running!"


@app.route('/health')
def health():
    return jsonify({
        "status": "healthy",
        "model_loaded": model_manager is not None,
        "timestamp": datetime.now().isoformat()
    })


@app.route('/model')
def model_info():
    if not model_manager:
        return jsonify({"error": "Model not available"}), 500
    try:
        return jsonify(model_manager.describe())
    except Exception as e:
        return jsonify({"error": f"Failed to describe model: {str(e)}"}), 500


@app.route('/infer', methods=['POST'])
def infer_route():
    """Per-frame DOA stream for an uploaded 6-channel mixture and 1-channel anchor"""
    if not model_manager:
        return jsonify({"error": "Model not available"}), 500
    try:
        mixture = read_upload("mix", model_manager.config.model.mics)
        anchor = read_upload("anchor", 1)[0]
    except UploadError as e:
        return jsonify({"error": str(e)}), 400
    try:
        records = model_manager.infer(mixture, anchor)
    except ValueError as e:
        return jsonify({"error": f"Inference failed: {str(e)}"}), 400
    except Exception as e:
        return jsonify({"error": f"Inference failed: {str(e)}"}), 500
    voiced = [r for r in records if r[2] is not None]
    return jsonify({
        "frames": [{"time_s": t, "class": c, "angle": a} for t, c, a in records],
        "frame_count": len(records),
        "voiced_frames": len(voiced),
        "duration_s": round(mixture.shape[1] / SAMPLE_RATE, 3),
        "dominant_angle": int(np.bincount([a // 10 for _, _, a in voiced]).argmax() * 10) if voiced else None,
        "timestamp": datetime.now().isoformat()
    })


if __name__ == '__main__':
    # Get configuration from environment
    debug = os.getenv('FLASK_DEBUG', 'False').lower() == 'true'
    host = os.getenv('FLASK_HOST', '0.0.0.0')
    port = int(os.getenv('FLASK_PORT', '5000'))

    print(f"🚀 Starting server on {host}:{port} (debug={debug})")
    app.run(debug=debug, host=host, port=port)
