import datetime
import ipaddress

import numpy as np
import pytest

from transfed.layers import cross_entropy
from transfed.model import ModelConfig, build


def toy_config(**overrides) -> ModelConfig:
    base = dict(window_rows=4, features=3, d_model=4, heads=2,
                transformer_layers=1, n_classes=2, seed=7)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def toy_model():
    return build(toy_config())


def finite_diff_grads(fn, array, h=1e-5):
    """Central-difference gradient of scalar fn() w.r.t. an array, in place."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + h
        plus = fn()
        array[idx] = orig - h
        minus = fn()
        array[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def assert_grads_close(analytic, numeric, rel=1e-4, atol=1e-8, label=""):
    """Gradcheck criterion: |a - f| <= rel * (|a| + |f|) + atol per entry.

    The absolute floor absorbs finite-difference round-off on entries whose
    true gradient is zero.
    """
    diff = np.abs(analytic - numeric)
    bound = rel * (np.abs(analytic) + np.abs(numeric)) + atol
    bad = diff > bound
    assert not bad.any(), (
        f"{label}: {int(bad.sum())} gradient entries off; worst "
        f"diff {diff.max():.3e} vs bound {bound[bad].min():.3e}"
    )


def model_loss_fn(model, x, labels):
    return lambda: cross_entropy(model.forward(x), labels)


def make_test_cert(tmp_path, name="server"):
    """Self-signed cert/key PEM pair valid for localhost and 127.0.0.1."""
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import rsa
    from cryptography.x509.oid import NameOID

    key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "localhost")])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(days=1))
        .add_extension(
            x509.SubjectAlternativeName([
                x509.DNSName("localhost"),
                x509.IPAddress(ipaddress.ip_address("127.0.0.1")),
            ]),
            critical=False,
        )
        .sign(key, hashes.SHA256())
    )
    cert_path = tmp_path / f"{name}.crt"
    key_path = tmp_path / f"{name}.key"
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.TraditionalOpenSSL,
        serialization.NoEncryption(),
    ))
    return str(cert_path), str(key_path)
