//! One randomized finite-difference check per call, for every graph op.

use pepnet::Tensor;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, rand_away_from_zero, randn, spd_batch, GradCheck};

pub type OpCheck = fn(&mut ChaCha8Rng) -> GradCheck;

const H: f32 = 1e-2;

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn conv2d(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, c, o) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
    let (h, w) = (dims(rng, 3, 6), dims(rng, 3, 6));
    let (stride, padding) = (dims(rng, 1, 2), dims(rng, 0, 1));
    let k = dims(rng, 1, 3.min(h.min(w) + 2 * padding));
    let x = randn(&[n, c, h, w], rng);
    let kernel = randn(&[o, c, k, k], rng);
    gradcheck(&[x, kernel], &[true, true], H, rng, |g, v| {
        g.conv2d(v[0], v[1], stride, padding)
    })
}

fn add_channel_bias(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, c, h, w) = (
        dims(rng, 1, 2),
        dims(rng, 1, 3),
        dims(rng, 1, 4),
        dims(rng, 1, 4),
    );
    let x = randn(&[n, c, h, w], rng);
    let b = randn(&[c], rng);
    gradcheck(&[x, b], &[true, true], H, rng, |g, v| {
        g.add_channel_bias(v[0], v[1])
    })
}

fn linear(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, f, o) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 5));
    let inputs = [randn(&[n, f], rng), randn(&[f, o], rng), randn(&[o], rng)];
    gradcheck(&inputs, &[true, true, true], H, rng, |g, v| {
        g.linear(v[0], v[1], v[2])
    })
}

fn matmul(rng: &mut ChaCha8Rng) -> GradCheck {
    let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 4));
    let inputs = [randn(&[m, k], rng), randn(&[k, n], rng)];
    gradcheck(&inputs, &[true, true], H, rng, |g, v| g.matmul(v[0], v[1]))
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..dims(rng, 1, 3)).map(|_| dims(rng, 1, 4)).collect()
}

fn add(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let inputs = [randn(&s, rng), randn(&s, rng)];
    gradcheck(&inputs, &[true, true], H, rng, |g, v| g.add(v[0], v[1]))
}

fn mul(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let inputs = [randn(&s, rng), randn(&s, rng)];
    gradcheck(&inputs, &[true, true], H, rng, |g, v| g.mul(v[0], v[1]))
}

fn scale(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let factor = rng.random_range(-3.0..3.0f32);
    gradcheck(&[randn(&s, rng)], &[true], H, rng, |g, v| {
        Ok(g.scale(v[0], factor))
    })
}

fn relu(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    gradcheck(
        &[rand_away_from_zero(&s, 0.05, 2.0, rng)],
        &[true],
        H,
        rng,
        |g, v| Ok(g.relu(v[0])),
    )
}

fn sigmoid(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    gradcheck(&[randn(&s, rng)], &[true], H, rng, |g, v| {
        Ok(g.sigmoid(v[0]))
    })
}

fn exp(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    gradcheck(&[randn(&s, rng)], &[true], H, rng, |g, v| Ok(g.exp(v[0])))
}

fn clamp(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let n = s.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(-1.5..1.5f32);
            if (v.abs() - 0.5).abs() > 0.05 {
                break v;
            }
        })
        .collect();
    let x = Tensor::new(s, data).unwrap();
    gradcheck(&[x], &[true], H, rng, |g, v| Ok(g.clamp(v[0], -0.5, 0.5)))
}

fn avg_pool2(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, c) = (dims(rng, 1, 2), dims(rng, 1, 3));
    let (h, w) = (2 * dims(rng, 1, 3), 2 * dims(rng, 1, 3));
    gradcheck(&[randn(&[n, c, h, w], rng)], &[true], H, rng, |g, v| {
        g.avg_pool2(v[0])
    })
}

fn upsample2(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, c, h, w) = (
        dims(rng, 1, 2),
        dims(rng, 1, 3),
        dims(rng, 1, 3),
        dims(rng, 1, 3),
    );
    gradcheck(&[randn(&[n, c, h, w], rng)], &[true], H, rng, |g, v| {
        g.upsample2(v[0])
    })
}

fn concat_channels(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, h, w) = (dims(rng, 1, 2), dims(rng, 1, 4), dims(rng, 1, 4));
    let inputs = [
        randn(&[n, dims(rng, 1, 3), h, w], rng),
        randn(&[n, dims(rng, 1, 3), h, w], rng),
    ];
    gradcheck(&inputs, &[true, true], H, rng, |g, v| {
        g.concat_channels(v[0], v[1])
    })
}

fn tile_concat(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, c, h, w, d) = (
        dims(rng, 1, 2),
        dims(rng, 1, 3),
        dims(rng, 1, 4),
        dims(rng, 1, 4),
        dims(rng, 1, 4),
    );
    let inputs = [randn(&[n, c, h, w], rng), randn(&[n, d], rng)];
    gradcheck(&inputs, &[true, true], H, rng, |g, v| {
        g.tile_concat(v[0], v[1])
    })
}

fn global_avg_pool(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, c, h, w) = (
        dims(rng, 1, 2),
        dims(rng, 1, 3),
        dims(rng, 1, 4),
        dims(rng, 1, 4),
    );
    gradcheck(&[randn(&[n, c, h, w], rng)], &[true], H, rng, |g, v| {
        g.global_avg_pool(v[0])
    })
}

fn slice_cols(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, f) = (dims(rng, 1, 4), dims(rng, 2, 6));
    let start = dims(rng, 0, f - 1);
    let end = dims(rng, start + 1, f);
    gradcheck(&[randn(&[n, f], rng)], &[true], H, rng, |g, v| {
        g.slice_cols(v[0], start, end)
    })
}

fn pad_cols(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, k) = (dims(rng, 1, 4), dims(rng, 1, 4));
    let width = dims(rng, k, k + 3);
    gradcheck(&[randn(&[n, k], rng)], &[true], H, rng, |g, v| {
        g.pad_cols(v[0], width)
    })
}

fn sum(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    gradcheck(&[randn(&s, rng)], &[true], H, rng, |g, v| Ok(g.sum(v[0])))
}

fn mean(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    gradcheck(&[randn(&s, rng)], &[true], H, rng, |g, v| Ok(g.mean(v[0])))
}

fn bce_with_logits(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let n = s.iter().product();
    let target = Tensor::new(
        s.clone(),
        (0..n).map(|_| rng.random_bool(0.5) as u8 as f32).collect(),
    )
    .unwrap();
    let logits = randn(&s, rng);
    gradcheck(&[logits, target], &[true, false], H, rng, |g, v| {
        g.bce_with_logits(v[0], v[1])
    })
}

fn log_var(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![n, k],
        (0..n * k).map(|_| rng.random_range(-1.5..1.0f32)).collect(),
    )
    .unwrap()
}

fn diag_gaussian_kl(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, d) = (dims(rng, 1, 3), dims(rng, 1, 6));
    let inputs = [
        randn(&[n, d], rng),
        log_var(n, d, rng),
        randn(&[n, d], rng),
        log_var(n, d, rng),
    ];
    gradcheck(&inputs, &[true; 4], H, rng, |g, v| {
        g.diag_gaussian_kl(v[0], v[1], v[2], v[3])
    })
}

fn gaussian_kl(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, k) = (dims(rng, 1, 3), dims(rng, 1, 4));
    let inputs = [
        randn(&[n, k], rng),
        spd_batch(n, k, rng),
        randn(&[n, k], rng),
        spd_batch(n, k, rng),
    ];
    gradcheck(&inputs, &[true; 4], H, rng, |g, v| {
        g.gaussian_kl(v[0], v[1], v[2], v[3])
    })
}

fn gaussian_sample(rng: &mut ChaCha8Rng) -> GradCheck {
    let (n, k) = (dims(rng, 1, 3), dims(rng, 1, 4));
    let inputs = [
        randn(&[n, k], rng),
        spd_batch(n, k, rng),
        randn(&[n, k], rng),
    ];
    gradcheck(&inputs, &[true; 3], H, rng, |g, v| {
        g.gaussian_sample(v[0], v[1], v[2])
    })
}

pub fn all() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("conv2d", conv2d),
        ("add_channel_bias", add_channel_bias),
        ("linear", linear),
        ("matmul", matmul),
        ("add", add),
        ("mul", mul),
        ("scale", scale),
        ("relu", relu),
        ("sigmoid", sigmoid),
        ("exp", exp),
        ("clamp", clamp),
        ("avg_pool2", avg_pool2),
        ("upsample2", upsample2),
        ("concat_channels", concat_channels),
        ("tile_concat", tile_concat),
        ("global_avg_pool", global_avg_pool),
        ("slice_cols", slice_cols),
        ("pad_cols", pad_cols),
        ("sum", sum),
        ("mean", mean),
        ("bce_with_logits", bce_with_logits),
        ("diag_gaussian_kl", diag_gaussian_kl),
        ("gaussian_kl", gaussian_kl),
        ("gaussian_sample", gaussian_sample),
    ]
}
