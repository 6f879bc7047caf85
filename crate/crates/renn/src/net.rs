//! A small fully-connected network with two interchangeable heads: the
//! evidence head (rectified output, `alpha = evidence + 1`) and the softmax
//! head for the L2 baseline. Backpropagation is exact and everything is
//! deterministic under a fixed seed.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EvidenceActivation, TrainConfig};
use crate::data::{estimate_knn_alpha, Dataset, Partition};
use crate::error::{Error, Result};
use crate::loss::{total_loss_with_grads, BatchItem, LossBreakdown, LossConfig};
use crate::sl::DirichletParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Evidence(EvidenceActivation),
    Softmax,
}

/// Network parameters. Weight matrix `l` is row-major with shape
/// `(layer_dims[l+1], layer_dims[l])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub head: Head,
    pub seed: u64,
}

impl ModelParams {
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }
}

/// He-initialized parameters: zero-mean Gaussians at `sqrt(2 / fan_in)`,
/// zero biases. Same seed, same bytes.
pub fn init(layer_dims: &[usize], head: Head, seed: u64) -> Result<ModelParams> {
    if layer_dims.len() < 2 {
        return Err(Error::Domain("need at least input and output layer dims".into()));
    }
    if layer_dims.contains(&0) {
        return Err(Error::Domain("layer dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 {
        // Box-Muller on the seeded stream
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std_dev = (2.0 / fan_in as f64).sqrt();
        weights.push((0..fan_in * fan_out).map(|_| normal() * std_dev).collect());
        biases.push(vec![0.0; fan_out]);
    }
    Ok(ModelParams {
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
        head,
        seed,
    })
}

/// Forward-pass state retained for `backward`.
#[derive(Debug, Clone)]
pub struct Cache {
    /// Activation entering each layer (post-dropout for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// Inverted-dropout masks on hidden outputs, when training with dropout.
    masks: Vec<Option<Vec<f64>>>,
}

fn affine(weights: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let fan_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            let row = &weights[r * fan_in..(r + 1) * fan_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn forward_inner(
    params: &ModelParams,
    x: &[f64],
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Vec<f64>, Cache)> {
    if x.len() != params.input_dim() {
        return Err(Error::Domain(format!(
            "input has {} features, model expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let layers = params.num_layers();
    let mut inputs = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    let mut masks = Vec::with_capacity(layers);
    let mut a = x.to_vec();
    for l in 0..layers {
        inputs.push(a.clone());
        let z = affine(&params.weights[l], &params.biases[l], &a);
        if l + 1 < layers {
            a = z.iter().map(|&v| v.max(0.0)).collect();
            if let Some((keep, rng)) = dropout.as_mut() {
                let mask: Vec<f64> = a
                    .iter()
                    .map(|_| if rng.gen::<f64>() < *keep { 1.0 / *keep } else { 0.0 })
                    .collect();
                for (v, m) in a.iter_mut().zip(&mask) {
                    *v *= m;
                }
                masks.push(Some(mask));
            } else {
                masks.push(None);
            }
        } else {
            a = match params.head {
                Head::Evidence(EvidenceActivation::Relu) => {
                    z.iter().map(|&v| v.max(0.0)).collect()
                }
                Head::Evidence(EvidenceActivation::Softplus) => {
                    z.iter().map(|&v| softplus(v)).collect()
                }
                Head::Softmax => softmax(&z),
            };
            masks.push(None);
        }
        pre.push(z);
    }
    Ok((a, Cache { inputs, pre, masks }))
}

/// Evaluates the network: evidence (>= 0) for the evidence head, class
/// probabilities for the softmax head.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<(Vec<f64>, Cache)> {
    forward_inner(params, x, None)
}

/// Parameter gradients, mirroring `ModelParams` shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Backpropagates `grad_output` (the loss gradient with respect to the head
/// output: evidence for the evidence head, logits for softmax) into parameter
/// gradients.
pub fn backward(params: &ModelParams, cache: &Cache, grad_output: &[f64]) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(params);
    backward_into(params, cache, grad_output, &mut grads)?;
    Ok(grads)
}

fn backward_into(
    params: &ModelParams,
    cache: &Cache,
    grad_output: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let layers = params.num_layers();
    if cache.pre.len() != layers
        || cache.inputs.len() != layers
        || cache.pre.last().map(Vec::len) != Some(params.output_dim())
        || cache.inputs[0].len() != params.input_dim()
    {
        return Err(Error::Internal("forward cache does not match model shape".into()));
    }
    if grad_output.len() != params.output_dim() {
        return Err(Error::Internal("grad_output length mismatch".into()));
    }
    let last_pre = &cache.pre[layers - 1];
    let mut delta: Vec<f64> = match params.head {
        Head::Evidence(EvidenceActivation::Relu) => grad_output
            .iter()
            .zip(last_pre)
            .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
            .collect(),
        Head::Evidence(EvidenceActivation::Softplus) => grad_output
            .iter()
            .zip(last_pre)
            .map(|(g, &z)| g * sigmoid(z))
            .collect(),
        Head::Softmax => grad_output.to_vec(),
    };
    for l in (0..layers).rev() {
        let input = &cache.inputs[l];
        let fan_in = input.len();
        for (r, &d) in delta.iter().enumerate() {
            grads.biases[l][r] += d;
            let row = &mut grads.weights[l][r * fan_in..(r + 1) * fan_in];
            for (w, x) in row.iter_mut().zip(input) {
                *w += d * x;
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; fan_in];
            for (r, &d) in delta.iter().enumerate() {
                let row = &params.weights[l][r * fan_in..(r + 1) * fan_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += d * w;
                }
            }
            for (p, &z) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                if z <= 0.0 {
                    *p = 0.0;
                }
            }
            if let Some(mask) = &cache.masks[l - 1] {
                for (p, m) in prev.iter_mut().zip(mask) {
                    *p *= m;
                }
            }
            delta = prev;
        }
    }
    Ok(())
}

/// Cross-entropy plus L2 weight decay for the softmax baseline. Returns the
/// loss and the gradient with respect to the logits; the decay gradient is
/// added to the parameter gradients by the caller.
pub fn cross_entropy_l2(
    probs: &[f64],
    y: &[f64],
    params: &ModelParams,
    weight_decay: f64,
) -> Result<(f64, Vec<f64>)> {
    if probs.len() != y.len() {
        return Err(Error::Domain("probs/label length mismatch".into()));
    }
    let hot = y
        .iter()
        .position(|&v| v == 1.0)
        .ok_or_else(|| Error::Domain("label has no hot entry".into()))?;
    let decay: f64 = params
        .weights
        .iter()
        .map(|w| w.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let loss = -probs[hot].max(1e-300).ln() + 0.5 * weight_decay * decay;
    let grad_logits = probs.iter().zip(y).map(|(p, t)| p - t).collect();
    Ok((loss, grad_logits))
}

/// Adam state with the conventional defaults.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        OptimState {
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Training("non-finite gradient entry".into()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    };
    for l in 0..params.weights.len() {
        update(
            &mut params.weights[l],
            &grads.weights[l],
            &mut state.first_moment.weights[l],
            &mut state.second_moment.weights[l],
        );
        update(
            &mut params.biases[l],
            &grads.biases[l],
            &mut state.first_moment.biases[l],
            &mut state.second_moment.biases[l],
        );
    }
    Ok(())
}

fn one_hot(k: usize, class: usize) -> Vec<f64> {
    let mut y = vec![0.0; k];
    y[class] = 1.0;
    y
}

/// Composite regularized loss of one evidence-head batch together with the
/// parameter gradients. `labeled` holds IN and BOD indices, `ood` the OOD
/// draw; `alpha_hats` supplies neighbor estimates when the k-NN KL is on.
#[allow(clippy::too_many_arguments)]
pub fn evidence_batch_loss(
    params: &ModelParams,
    dataset: &Dataset,
    labeled: &[usize],
    ood: &[usize],
    alpha_hats: Option<&HashMap<usize, DirichletParams>>,
    cfg: &LossConfig,
    lambda_t: f64,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(LossBreakdown, Gradients)> {
    let mut items = Vec::with_capacity(labeled.len() + ood.len());
    let mut caches = Vec::with_capacity(labeled.len() + ood.len());
    for &idx in labeled.iter().chain(ood) {
        let sample = &dataset.samples[idx];
        let (evidence, cache) = match dropout.as_mut() {
            Some((keep, rng)) => forward_inner(params, &sample.features, Some((*keep, &mut **rng)))?,
            None => forward(params, &sample.features)?,
        };
        let alpha = DirichletParams::from_network_evidence(&evidence)?;
        let alpha_hat = if cfg.use_knn_kl && sample.partition != Partition::Ood {
            Some(
                alpha_hats
                    .and_then(|m| m.get(&idx))
                    .cloned()
                    .ok_or_else(|| {
                        Error::Config(format!("missing k-NN estimate for sample {idx}"))
                    })?,
            )
        } else {
            None
        };
        items.push(BatchItem {
            alpha,
            label: sample.label,
            partition: sample.partition,
            alpha_hat,
        });
        caches.push(cache);
    }
    let (breakdown, alpha_grads) = total_loss_with_grads(&items, cfg, lambda_t)?;
    let mut grads = Gradients::zeros_like(params);
    for (cache, grad_alpha) in caches.iter().zip(&alpha_grads) {
        // d alpha / d evidence = 1, so the alpha gradient passes straight through
        backward_into(params, cache, grad_alpha, &mut grads)?;
    }
    Ok((breakdown, grads))
}

/// Mean cross-entropy plus weight decay over one softmax batch, with
/// parameter gradients (decay gradient included).
pub fn l2_batch_loss(
    params: &ModelParams,
    dataset: &Dataset,
    labeled: &[usize],
    weight_decay: f64,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(LossBreakdown, Gradients)> {
    let k = params.output_dim();
    let scale = 1.0 / labeled.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut mean_ce = 0.0;
    for &idx in labeled {
        let sample = &dataset.samples[idx];
        let class = sample
            .label
            .ok_or_else(|| Error::Internal("unlabeled sample in softmax batch".into()))?;
        let (probs, cache) = match dropout.as_mut() {
            Some((keep, rng)) => forward_inner(params, &sample.features, Some((*keep, &mut **rng)))?,
            None => forward(params, &sample.features)?,
        };
        let y = one_hot(k, class);
        let (loss, grad_logits) = cross_entropy_l2(&probs, &y, params, 0.0)?;
        mean_ce += loss * scale;
        let scaled: Vec<f64> = grad_logits.iter().map(|g| g * scale).collect();
        backward_into(params, &cache, &scaled, &mut grads)?;
    }
    let decay: f64 = params
        .weights
        .iter()
        .map(|w| w.iter().map(|x| x * x).sum::<f64>())
        .sum();
    for (gw, w) in grads.weights.iter_mut().zip(&params.weights) {
        for (g, x) in gw.iter_mut().zip(w) {
            *g += weight_decay * x;
        }
    }
    let mut breakdown = LossBreakdown {
        ssl: mean_ce,
        ..LossBreakdown::default()
    };
    breakdown.total = mean_ce + 0.5 * weight_decay * decay;
    Ok((breakdown, grads))
}

/// Trained parameters and the per-epoch loss history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<LossBreakdown>,
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Mini-batch training over the dataset partitions. Deterministic for a
/// fixed config and seed.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let labeled = dataset.labeled_indices();
    let ood = dataset.ood_indices();
    if labeled.is_empty() {
        return Err(Error::Config("dataset has no labeled samples".into()));
    }
    let variant = config.variant;
    if variant.needs_ood() && ood.is_empty() {
        return Err(Error::Config(format!(
            "variant {variant} requires OOD-tagged samples"
        )));
    }
    if variant.needs_bod() && dataset.bod_indices().is_empty() {
        return Err(Error::Config(format!(
            "variant {variant} requires BOD-tagged samples"
        )));
    }

    let head = if variant.is_evidential() {
        Head::Evidence(config.evidence_activation)
    } else {
        Head::Softmax
    };
    let mut dims = vec![dataset.feature_dim];
    dims.extend(&config.architecture);
    dims.push(dataset.num_classes);
    let mut params = init(&dims, head, config.seed)?;
    let mut state = OptimState::new(&params, config.learning_rate);

    // Per-sample regularizer weights. total_loss averages the vacuity and
    // dissonance terms within their partitions, so a fixed lambda would let
    // the regularizer pressure shrink as the partition draw grows; scaling by
    // the draw size keeps every OOD/BOD sample contributing at weight lambda
    // next to the labeled-mean terms, which is what makes lambda = 0.01
    // effective at this batch size.
    let loss_cfg = LossConfig {
        lambda1: if variant.needs_ood() { config.lambda1 } else { 0.0 },
        lambda2: if variant.needs_bod() { config.lambda2 } else { 0.0 },
        kl_anneal_epochs: config.kl_anneal_epochs,
        use_knn_kl: config.use_knn_kl,
        use_misleading_kl: true,
    };

    let alpha_hats = if variant.is_evidential() && config.use_knn_kl {
        let mut map = HashMap::new();
        for &idx in &labeled {
            map.insert(
                idx,
                estimate_knn_alpha(dataset, idx, config.knn_k, config.knn_metric)?,
            );
        }
        Some(map)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED_CAFE));
    let mut labeled_order = labeled.clone();
    let mut ood_order = ood.clone();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        shuffle(&mut labeled_order, &mut rng);
        if variant.needs_ood() {
            shuffle(&mut ood_order, &mut rng);
        }
        let lambda_t = loss_cfg.lambda_t(epoch);
        let mut ood_cursor = 0usize;
        let mut epoch_sum = LossBreakdown::default();
        let mut weight_sum = 0.0;
        for (batch_no, chunk) in labeled_order.chunks(config.batch_size).enumerate() {
            let ood_draw: Vec<usize> = if variant.needs_ood() {
                let want =
                    (chunk.len() * ood.len() + labeled.len() - 1) / labeled.len();
                (0..want.max(1))
                    .map(|_| {
                        let idx = ood_order[ood_cursor % ood_order.len()];
                        ood_cursor += 1;
                        idx
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let dropout = config.dropout_keep.map(|keep| (keep, &mut rng));
            let (breakdown, grads) = if variant.is_evidential() {
                let n_bod = chunk
                    .iter()
                    .filter(|&&i| dataset.samples[i].partition == Partition::Bod)
                    .count();
                let batch_cfg = LossConfig {
                    lambda1: loss_cfg.lambda1 * ood_draw.len() as f64,
                    lambda2: loss_cfg.lambda2 * n_bod as f64,
                    ..loss_cfg.clone()
                };
                evidence_batch_loss(
                    &params,
                    dataset,
                    chunk,
                    &ood_draw,
                    alpha_hats.as_ref(),
                    &batch_cfg,
                    lambda_t,
                    dropout,
                )?
            } else {
                l2_batch_loss(&params, dataset, chunk, config.weight_decay, dropout)?
            };
            adam_step(&mut params, &grads, &mut state).map_err(|e| {
                Error::Training(format!("epoch {epoch}, batch {batch_no}: {e}"))
            })?;
            let w = chunk.len() as f64;
            epoch_sum.ssl += breakdown.ssl * w;
            epoch_sum.misleading_kl += breakdown.misleading_kl * w;
            epoch_sum.vacuity_term += breakdown.vacuity_term * w;
            epoch_sum.dissonance_term += breakdown.dissonance_term * w;
            epoch_sum.knn_kl_term += breakdown.knn_kl_term * w;
            epoch_sum.total += breakdown.total * w;
            weight_sum += w;
        }
        history.push(LossBreakdown {
            ssl: epoch_sum.ssl / weight_sum,
            misleading_kl: epoch_sum.misleading_kl / weight_sum,
            vacuity_term: epoch_sum.vacuity_term / weight_sum,
            dissonance_term: epoch_sum.dissonance_term / weight_sum,
            knn_kl_term: epoch_sum.knn_kl_term / weight_sum,
            total: epoch_sum.total / weight_sum,
        });
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    layer_dims: Vec<usize>,
    head: Head,
    seed: u64,
    /// Row-major per layer, matching `ModelParams::weights`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    config: TrainConfig,
}

/// Writes the checkpoint atomically (temp file + rename).
pub fn save_checkpoint(params: &ModelParams, config: &TrainConfig, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        layer_dims: params.layer_dims.clone(),
        head: params.head,
        seed: params.seed,
        weights: params.weights.clone(),
        biases: params.biases.clone(),
        config: config.clone(),
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("checkpoint serialization: {e}")))?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if file.layer_dims.len() < 2 {
        return Err(Error::Format("checkpoint has too few layers".into()));
    }
    for (l, w) in file.layer_dims.windows(2).enumerate() {
        if file.weights.get(l).map(Vec::len) != Some(w[0] * w[1])
            || file.biases.get(l).map(Vec::len) != Some(w[1])
        {
            return Err(Error::Format(format!("checkpoint layer {l} has wrong shape")));
        }
    }
    Ok((
        ModelParams {
            layer_dims: file.layer_dims,
            weights: file.weights,
            biases: file.biases,
            head: file.head,
            seed: file.seed,
        },
        file.config,
    ))
}
