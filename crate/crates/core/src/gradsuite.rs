//! Finite-difference checks for every differentiable op, both relation
//! modules and a small end-to-end network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::network::{loss, Network, NetworkConfig};
use crate::relation::{
    channel_relation_augment, spatial_relation_augment, ChannelVars, IntegrationMode, SpatialVars,
};
use crate::tensor::{grad_check, Graph, OpKind, Tensor, Var};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

/// Worst relative error over every input of `f`, checking one input at a
/// time while the others are held constant.
fn check_inputs<F>(inputs: &[Tensor], fault: Option<OpKind>, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let report = grad_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { g.constant(t.clone()) })
                    .collect();
                f(g, &vars)
            },
            &inputs[k],
            STEP,
            fault,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output entry gets its own weight.
fn readout(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let weighted = g.mul(y, r)?;
    g.sum(weighted)
}

struct Inputs(ChaCha8Rng);

impl Inputs {
    fn uniform(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.0.gen_range(-1.0..1.0))
    }

    /// Values at least 0.1 from zero, so no probe crosses a relu kink.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| {
            let v: f64 = self.0.gen_range(0.1..1.0);
            if self.0.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }
}

fn op_check(kind: OpKind, rng: &mut Inputs, fault: Option<OpKind>) -> Result<f64> {
    match kind {
        OpKind::MatMul => {
            let r = rng.uniform(&[3, 2]);
            let inputs = [rng.uniform(&[3, 4]), rng.uniform(&[4, 2])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                readout(g, y, &r)
            })
        }
        OpKind::Conv1x1 => {
            let r = rng.uniform(&[4, 2, 3]);
            let inputs = [rng.uniform(&[3, 2, 3]), rng.uniform(&[4, 3]), rng.uniform(&[4])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.conv1x1(v[0], v[1], Some(v[2]))?;
                readout(g, y, &r)
            })
        }
        OpKind::Conv3x3 => {
            let r1 = rng.uniform(&[3, 5, 4]);
            let r2 = rng.uniform(&[3, 3, 2]);
            let inputs = [rng.uniform(&[2, 5, 4]), rng.uniform(&[3, 2, 3, 3]), rng.uniform(&[3])];
            check_inputs(&inputs, fault, |g, v| {
                let y1 = g.conv3x3(v[0], v[1], Some(v[2]), 1)?;
                let y2 = g.conv3x3(v[0], v[1], Some(v[2]), 2)?;
                let a = readout(g, y1, &r1)?;
                let b = readout(g, y2, &r2)?;
                g.add(a, b)
            })
        }
        OpKind::Relu => {
            let r = rng.uniform(&[2, 3, 3]);
            let inputs = [rng.off_zero(&[2, 3, 3])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.relu(v[0])?;
                readout(g, y, &r)
            })
        }
        OpKind::SoftmaxRows => {
            let r = rng.uniform(&[3, 4]);
            let inputs = [rng.uniform(&[3, 4])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.softmax_rows(v[0])?;
                readout(g, y, &r)
            })
        }
        OpKind::GlobalAvgPool => {
            let r = rng.uniform(&[3]);
            let inputs = [rng.uniform(&[3, 2, 2])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.global_avg_pool(v[0])?;
                readout(g, y, &r)
            })
        }
        OpKind::Reshape => {
            let r = rng.uniform(&[3, 4]);
            let inputs = [rng.uniform(&[2, 6])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                readout(g, y, &r)
            })
        }
        OpKind::Transpose2d => {
            let r = rng.uniform(&[4, 3]);
            let inputs = [rng.uniform(&[3, 4])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.transpose2d(v[0])?;
                readout(g, y, &r)
            })
        }
        OpKind::ConcatChannels => {
            let r = rng.uniform(&[5, 2, 2]);
            let inputs = [rng.uniform(&[2, 2, 2]), rng.uniform(&[3, 2, 2])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                readout(g, y, &r)
            })
        }
        OpKind::Add => {
            let r = rng.uniform(&[2, 3]);
            let inputs = [rng.uniform(&[2, 3]), rng.uniform(&[2, 3])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.add(v[0], v[1])?;
                readout(g, y, &r)
            })
        }
        OpKind::Mul => {
            let inputs = [rng.uniform(&[2, 3]), rng.uniform(&[2, 3])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.mul(v[0], v[1])?;
                let y = g.mul(y, v[0])?;
                g.sum(y)
            })
        }
        OpKind::Scale => {
            let r = rng.uniform(&[2, 3]);
            let inputs = [rng.uniform(&[2, 3])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.scale(v[0], -1.7)?;
                readout(g, y, &r)
            })
        }
        OpKind::Sum => {
            let inputs = [rng.uniform(&[2, 3])];
            check_inputs(&inputs, fault, |g, v| g.sum(v[0]))
        }
        OpKind::UpsampleNearest => {
            let r = rng.uniform(&[2, 4, 6]);
            let inputs = [rng.uniform(&[2, 2, 3])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.upsample_nearest(v[0], 2)?;
                readout(g, y, &r)
            })
        }
        OpKind::ColumnEmbed => {
            let r = rng.uniform(&[3, 4]);
            let inputs = [rng.uniform(&[4]), rng.uniform(&[3, 4]), rng.uniform(&[3])];
            check_inputs(&inputs, fault, |g, v| {
                let y = g.column_embed(v[0], v[1], Some(v[2]))?;
                readout(g, y, &r)
            })
        }
        OpKind::CrossEntropy => {
            let labels = [0, 2, IGNORE_LABEL, 1, 1, 0];
            let inputs = [rng.uniform(&[3, 2, 3])];
            check_inputs(&inputs, fault, |g, v| g.cross_entropy(v[0], &labels, IGNORE_LABEL))
        }
    }
}

fn spatial_check(rng: &mut Inputs, fault: Option<OpKind>) -> Result<f64> {
    let (c, e, h, w) = (3, 2, 2, 3);
    let r = rng.uniform(&[c + h * w, h, w]);
    let inputs = [
        rng.uniform(&[c, h, w]),
        rng.uniform(&[e, c]),
        rng.uniform(&[e]),
        rng.uniform(&[e, c]),
        rng.uniform(&[e]),
    ];
    check_inputs(&inputs, fault, |g, v| {
        let p = SpatialVars {
            w_u: v[1],
            b_u: Some(v[2]),
            w_v: v[3],
            b_v: Some(v[4]),
            resolution: (h, w),
        };
        let y = spatial_relation_augment(g, v[0], &p)?;
        readout(g, y, &r)
    })
}

fn channel_check(rng: &mut Inputs, fault: Option<OpKind>) -> Result<f64> {
    let (c, e, h, w) = (4, 3, 2, 2);
    let r = rng.uniform(&[c, h, w]);
    let inputs = [
        rng.uniform(&[c, h, w]),
        rng.uniform(&[e, c]),
        rng.uniform(&[e]),
        rng.uniform(&[e, c]),
        rng.uniform(&[e]),
    ];
    check_inputs(&inputs, fault, |g, v| {
        let p = ChannelVars {
            w_u: v[1],
            b_u: Some(v[2]),
            w_v: v[3],
            b_v: Some(v[4]),
        };
        let y = channel_relation_augment(g, v[0], &p)?;
        readout(g, y, &r)
    })
}

/// The network used by the end-to-end check: two classes, an 8×8 tile and
/// serial integration.
pub fn small_network_config() -> NetworkConfig {
    NetworkConfig {
        in_channels: 3,
        num_classes: 2,
        tile: [8, 8],
        stage_channels: [3, 4, 4],
        stage_strides: [2, 4, 8],
        mode: IntegrationMode::Serial,
        c_e: None,
        relation_bias: true,
        seed: 5,
    }
}

/// Checks the loss gradient with respect to the image and every parameter
/// tensor, at random parameter values rather than the initialisation.
fn network_check(config: NetworkConfig, rng: &mut Inputs, fault: Option<OpKind>) -> Result<f64> {
    let mut net = Network::init(config.clone())?;
    // Zero-initialised biases put relation scores exactly on the relu kink.
    let generic: Vec<(String, Tensor)> = net
        .params()
        .into_iter()
        .map(|(name, t)| (name, rng.uniform(t.shape())))
        .collect();
    net.load_params(&generic)?;
    let [h, w] = config.tile;
    let image = rng.uniform(&[config.in_channels, h, w]);
    let mut data: Vec<u8> = (0..h * w)
        .map(|_| rng.0.gen_range(0..config.num_classes as u8))
        .collect();
    data[3] = IGNORE_LABEL;
    let labels = LabelMap::new(h, w, data)?;

    let wrt_image = grad_check(
        |g, x| {
            let vars = net.bind(g, false);
            let logits = net.forward_bound(g, &vars, x)?;
            loss(g, logits, &labels, IGNORE_LABEL)
        },
        &image,
        STEP,
        fault,
    )?;
    let mut worst = wrt_image.max_rel_error;
    for (name, tensor) in net.params() {
        let report = grad_check(
            |g, x| {
                let vars = net.bind_with(g, &mut |g, n, t| {
                    if n == name {
                        x
                    } else {
                        g.constant(t.clone())
                    }
                });
                let img = g.constant(image.clone());
                let logits = net.forward_bound(g, &vars, img)?;
                loss(g, logits, &labels, IGNORE_LABEL)
            },
            tensor,
            STEP,
            fault,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// Runs every check in a fixed order: one entry per [`OpKind`], then
/// `spatial_relation`, `channel_relation` and `network_serial`. `fault`
/// corrupts one op's backward rule to exercise the harness itself.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut rng = Inputs(ChaCha8Rng::seed_from_u64(0x5eed));
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        out.push(CheckResult {
            name: kind.name().to_string(),
            max_rel_error: op_check(kind, &mut rng, fault)?,
        });
    }
    out.push(CheckResult {
        name: "spatial_relation".into(),
        max_rel_error: spatial_check(&mut rng, fault)?,
    });
    out.push(CheckResult {
        name: "channel_relation".into(),
        max_rel_error: channel_check(&mut rng, fault)?,
    });
    out.push(CheckResult {
        name: "network_serial".into(),
        max_rel_error: network_check(small_network_config(), &mut rng, fault)?,
    });
    Ok(out)
}

/// Aligned `name  error  PASS|FAIL` lines.
pub fn format_report(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    results
        .iter()
        .map(|r| {
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            format!("{:<width$}  {:>10.3e}  {verdict}\n", r.name, r.max_rel_error)
        })
        .collect()
}
