//! Criterion micro-benchmarks for the primitive operations on a fixed-size
//! payload: mask generation/addition/subtraction, authenticated encryption
//! and decryption, signing and verification.

use criterion::{criterion_group, criterion_main, Criterion};
use peerfed_core::crypto::{
    generate_keypair, generate_noise, sign_envelope, verify_envelope, AeadSuite, CipherSuite,
};
use peerfed_core::model::EncodedUpdate;
use peerfed_core::FixedParams;
use std::hint::black_box;

const DIM: usize = 10_000;

fn primitives(c: &mut Criterion) {
    let params = FixedParams::default();
    let update = EncodedUpdate::zeros(DIM, params);
    let noise = generate_noise(DIM + 1, 0, 7, params).unwrap();
    let suite = AeadSuite;
    let key = [9u8; 16];
    let plaintext = update.to_bytes();
    let ciphertext = suite.encrypt(&key, 1, &plaintext);
    let keypair = generate_keypair(3);
    let envelope = sign_envelope(0, ciphertext.clone(), 5, &keypair.signing);

    c.bench_function("noise_generation", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            black_box(generate_noise(DIM + 1, 0, seed, params).unwrap())
        })
    });
    c.bench_function("noise_addition", |b| {
        b.iter(|| black_box(update.add_noise(&noise).unwrap()))
    });
    c.bench_function("noise_subtraction", |b| {
        b.iter(|| black_box(update.sub_noise(&noise).unwrap()))
    });
    c.bench_function("encryption", |b| {
        b.iter(|| black_box(suite.encrypt(&key, 2, &plaintext)))
    });
    c.bench_function("decryption", |b| {
        b.iter(|| black_box(suite.decrypt(&key, &ciphertext).unwrap()))
    });
    c.bench_function("signature", |b| {
        b.iter(|| black_box(sign_envelope(0, ciphertext.clone(), 5, &keypair.signing)))
    });
    c.bench_function("verification", |b| {
        b.iter(|| verify_envelope(black_box(&envelope), &keypair.verifying, 5, 10).unwrap())
    });
}

criterion_group!(benches, primitives);
criterion_main!(benches);
