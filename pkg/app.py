"""
Prohibited Item Detection API
Flask REST API serving a trained detector on uploaded X-ray images
"""

import os

import pandas as pd
from flask import Flask, jsonify, request
from PIL import Image, UnidentifiedImageError

from src.config import EvalConfig
from src.detector import ProhibitedItemDetector

DEFAULT_CHECKPOINT = 'models/doam_detector.joblib'


def load_detector(model_path):
    """Load the checkpoint, or return None when it is missing"""
    try:
        detector = ProhibitedItemDetector.from_checkpoint(model_path)
        print("✓ Pre-trained model loaded successfully")
        return detector
    except FileNotFoundError:
        print(f"⚠ No trained model at {model_path}. Train one with 'python cli.py train' first")
        return None


def _detections_payload(detections):
    return [
        {
            'category': d.category,
            'box': [round(v, 2) for v in d.box],
            'confidence': round(d.confidence * 100, 2),
        }
        for d in detections
    ]


def _read_image(upload):
    image = Image.open(upload.stream)
    image.load()
    return image


def create_app(model_path=None, eval_config=None):
    """
    Build the Flask app around one checkpoint

    Args:
        model_path (str): Checkpoint; defaults to $DOAM_CHECKPOINT
        eval_config (EvalConfig): Inference thresholds
    """
    model_path = model_path or os.getenv('DOAM_CHECKPOINT') or DEFAULT_CHECKPOINT
    eval_config = eval_config or EvalConfig()
    detector = load_detector(model_path)
    app = Flask(__name__)

    @app.route('/')
    def home():
        """API home page"""
        return jsonify({
            'service': 'Prohibited Item Detection API',
            'version': '1.0',
            'status': 'running',
            'endpoints': {
                '/detect': 'POST - Detect prohibited items in one image (multipart field "image")',
                '/batch-detect': 'POST - Detect prohibited items in several images (field "images")',
                '/health': 'GET - Check API health',
                '/model/info': 'GET - Get model information',
            }
        })

    @app.route('/health', methods=['GET'])
    def health():
        """Health check endpoint"""
        return jsonify({
            'status': 'healthy',
            'model_loaded': detector is not None
        })

    @app.route('/detect', methods=['POST'])
    def detect():
        """Detect prohibited items in an uploaded image"""
        try:
            if detector is None:
                return jsonify({'error': 'Model not loaded. Please train the model first.'}), 503

            upload = request.files.get('image')
            if upload is None:
                return jsonify({'error': 'No image provided'}), 400
            try:
                image = _read_image(upload)
            except (UnidentifiedImageError, OSError):
                return jsonify({'error': f"Could not read '{upload.filename}' as an image"}), 400

            detections = detector.predict_image(image, upload.filename or 'image', eval_config)
            return jsonify({
                'image': upload.filename,
                'width': image.width,
                'height': image.height,
                'count': len(detections),
                'detections': _detections_payload(detections),
                'timestamp': pd.Timestamp.now().isoformat()
            }), 200

        except Exception as e:
            return jsonify({
                'error': 'Internal server error',
                'message': str(e)
            }), 500

    @app.route('/batch-detect', methods=['POST'])
    def batch_detect():
        """Detect prohibited items in several uploaded images"""
        try:
            if detector is None:
                return jsonify({'error': 'Model not loaded. Please train the model first.'}), 503

            uploads = request.files.getlist('images')
            if not uploads:
                return jsonify({'error': 'No images provided'}), 400

            results = []
            for idx, upload in enumerate(uploads):
                try:
                    image = _read_image(upload)
                    detections = detector.predict_image(image, upload.filename or f"image_{idx}", eval_config)
                    results.append({
                        'index': idx,
                        'image': upload.filename,
                        'count': len(detections),
                        'detections': _detections_payload(detections)
                    })
                except Exception as e:
                    results.append({
                        'index': idx,
                        'error': str(e)
                    })

            return jsonify({
                'total_images': len(uploads),
                'results': results
            }), 200

        except Exception as e:
            return jsonify({
                'error': 'Internal server error',
                'message': str(e)
            }), 500

    @app.route('/model/info', methods=['GET'])
    def model_info():
        """Get model configuration and complexity"""
        try:
            if detector is None:
                return jsonify({'error': 'Model not loaded'}), 503

            return jsonify({
                'model_type': 'Single-stage detector' + (' with de-occlusion attention'
                                                          if detector.config.use_doam else ''),
                'class_names': detector.class_names,
                'config': detector.config.to_dict(),
                'complexity': detector.complexity().to_dict(),
                'model_loaded': True
            }), 200

        except Exception as e:
            return jsonify({
                'error': str(e)
            }), 500

    return app


# Module-level app for 'flask run'; tests build their own with create_app
app = create_app()


if __name__ == '__main__':
    app.run(debug=True, host='0.0.0.0', port=5000)
