#!/usr/bin/env python3
"""
Quick inference service check - posts a silent scene to a running server
"""

import io
import os
import sys
from datetime import datetime

import numpy as np
import requests
import soundfile as sf

BASE_URL = os.getenv("RTSDOA_SERVER", "http://localhost:5000")


def wav_file(channels, seconds=1.0, rate=16000):
    buffer = io.BytesIO()
    sf.write(buffer, np.zeros((int(seconds * rate), channels)), rate, format="WAV", subtype="FLOAT")
    buffer.seek(0)
    return buffer


def check_server():
    """Check that the service is up, has a model and answers /infer"""
    print("🔍 Checking inference service status...")
    working = 0

    for endpoint, name in [("/health", "Health"), ("/model", "Model Info")]:
        try:
            response = requests.get(f"{BASE_URL}{endpoint}", timeout=5)
            if response.status_code == 200:
                print(f"   ✅ {name}: Working")
                working += 1
            else:
                print(f"   ❌ {name}: Status {response.status_code}")
        except requests.exceptions.ConnectionError:
            print(f"   ❌ {name}: Connection refused (server not running?)")
        except requests.exceptions.Timeout:
            print(f"   ❌ {name}: Timeout")

    try:
        response = requests.post(
            f"{BASE_URL}/infer", files={"mix": wav_file(6), "anchor": wav_file(1)}, timeout=120
        )
        payload = response.json()
        if response.status_code == 200 and payload["frame_count"] == 99:
            print(f"   ✅ Inference: {payload['frame_count']} frames, {payload['voiced_frames']} voiced")
            working += 1
        else:
            print(f"   ❌ Inference: Status {response.status_code} - {payload.get('error', payload)}")
    except requests.RequestException as e:
        print(f"   ❌ Inference: Error - {e}")

    print(f"\n📊 Results: {working}/3 checks passed")
    if working == 3:
        print("🎉 Service is ready!")
        return True
    print("❌ Service is not fully working. Start it with:")
    print("   python rtsdoa.py serve --ckpt runs/desk.ckpt")
    return False


if __name__ == "__main__":
    print(f"🕐 Server Check at {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 60)
    ok = check_server()
    print("=" * 60)
    sys.exit(0 if ok else 1)
