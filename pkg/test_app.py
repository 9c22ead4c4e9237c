"""
Test the detection API with Flask's test client
"""

import io

import pytest
from PIL import Image

from app import create_app
from src.config import DetectorConfig, EvalConfig
from src.detector import ProhibitedItemDetector


def png_bytes(size=(48, 40)):
    buffer = io.BytesIO()
    Image.new('RGB', size, (180, 120, 60)).save(buffer, format='PNG')
    return buffer.getvalue()


@pytest.fixture
def checkpoint(tmp_path):
    path = str(tmp_path / 'model.joblib')
    ProhibitedItemDetector(path, DetectorConfig(image_size=32), seed=0).save_model()
    return path


@pytest.fixture
def client(checkpoint):
    app = create_app(checkpoint, EvalConfig(conf_thresh=0.05))
    app.testing = True
    return app.test_client()


@pytest.fixture
def empty_client(tmp_path):
    app = create_app(str(tmp_path / 'missing.joblib'))
    app.testing = True
    return app.test_client()


def test_home_lists_endpoints(client):
    payload = client.get('/').get_json()
    assert payload['status'] == 'running'
    assert '/detect' in payload['endpoints']


def test_health(client, empty_client):
    assert client.get('/health').get_json() == {'status': 'healthy', 'model_loaded': True}
    assert empty_client.get('/health').get_json()['model_loaded'] is False


def test_detect(client):
    response = client.post('/detect', data={'image': (io.BytesIO(png_bytes()), 'scan.png')},
                           content_type='multipart/form-data')
    assert response.status_code == 200
    payload = response.get_json()
    assert (payload['image'], payload['width'], payload['height']) == ('scan.png', 48, 40)
    assert payload['count'] == len(payload['detections'])
    for detection in payload['detections']:
        x1, y1, x2, y2 = detection['box']
        assert 0 <= x1 <= x2 <= 48 and 0 <= y1 <= y2 <= 40
        assert 0 <= detection['confidence'] <= 100


def test_detect_without_image(client):
    response = client.post('/detect', data={}, content_type='multipart/form-data')
    assert response.status_code == 400


def test_detect_rejects_non_images(client):
    response = client.post('/detect', data={'image': (io.BytesIO(b'not an image'), 'notes.txt')},
                           content_type='multipart/form-data')
    assert response.status_code == 400
    assert 'notes.txt' in response.get_json()['error']


def test_detect_without_model(empty_client):
    response = empty_client.post('/detect', data={'image': (io.BytesIO(png_bytes()), 'scan.png')},
                                 content_type='multipart/form-data')
    assert response.status_code == 503


def test_batch_detect(client):
    data = {'images': [(io.BytesIO(png_bytes()), 'a.png'), (io.BytesIO(b'junk'), 'b.png'),
                       (io.BytesIO(png_bytes((20, 20))), 'c.png')]}
    response = client.post('/batch-detect', data=data, content_type='multipart/form-data')
    assert response.status_code == 200
    payload = response.get_json()
    assert payload['total_images'] == 3
    results = payload['results']
    assert [r['index'] for r in results] == [0, 1, 2]
    assert 'error' in results[1]
    assert results[2]['image'] == 'c.png'


def test_batch_detect_without_images(client):
    response = client.post('/batch-detect', data={}, content_type='multipart/form-data')
    assert response.status_code == 400


def test_model_info(client, empty_client):
    payload = client.get('/model/info').get_json()
    assert payload['class_names'] == ['FO', 'ST', 'SC', 'UT', 'MU']
    assert payload['config']['image_size'] == 32
    assert payload['complexity']['parameters'] > 0
    assert payload['model_type'] == 'Single-stage detector'
    assert empty_client.get('/model/info').status_code == 503


def test_module_level_app_serves_without_a_model(monkeypatch, tmp_path):
    import app as app_module
    assert app_module.app.name == 'app'
    monkeypatch.setenv('DOAM_CHECKPOINT', str(tmp_path / 'missing.joblib'))
    fresh = create_app()
    fresh.testing = True
    assert fresh.test_client().get('/health').get_json()['model_loaded'] is False
