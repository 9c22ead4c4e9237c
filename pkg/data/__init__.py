"""Reference data bundled with the X-ray detection toolkit"""
