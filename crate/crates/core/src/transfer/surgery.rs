use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::mix_seed;
use crate::network::{ConvLayer, Network, NetworkConfig};

use super::weights::WeightsFile;

/// How to adapt a pretrained network to a new class set.
///
/// `reinit_layers` holds convolution indices (counting convolutions only,
/// from 0) whose weights are drawn fresh instead of copied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurgeryPlan {
    pub source_classes: usize,
    pub target_classes: usize,
    pub num_anchors: usize,
    pub reinit_layers: BTreeSet<usize>,
}

impl SurgeryPlan {
    /// The minimal plan: only the final convolution is re-initialized.
    pub fn final_layer(source_classes: usize, target: &NetworkConfig) -> Self {
        SurgeryPlan {
            source_classes,
            target_classes: target.head.num_classes,
            num_anchors: target.head.num_anchors(),
            reinit_layers: BTreeSet::from([target.num_conv_layers().saturating_sub(1)]),
        }
    }

    pub fn validate(&self, target: &NetworkConfig) -> Result<()> {
        let n = target.num_conv_layers();
        if n == 0 || !self.reinit_layers.contains(&(n - 1)) {
            return Err(Error::Surgery(format!(
                "the final convolution (index {}) must be re-initialized",
                n.saturating_sub(1)
            )));
        }
        if let Some(&bad) = self.reinit_layers.iter().find(|&&i| i >= n) {
            return Err(Error::Surgery(format!(
                "re-init index {bad} out of range, target has {n} convolutions"
            )));
        }
        if self.target_classes != target.head.num_classes {
            return Err(Error::Surgery(format!(
                "plan targets {} classes, config head has {}",
                self.target_classes, target.head.num_classes
            )));
        }
        if self.num_anchors != target.head.num_anchors() {
            return Err(Error::Surgery(format!(
                "plan uses {} anchors, config head has {}",
                self.num_anchors,
                target.head.num_anchors()
            )));
        }
        Ok(())
    }
}

/// Builds the target network, copying every convolution of `source` outside
/// `plan.reinit_layers` and drawing the rest uniformly in `±sqrt(1/(C·k·k))`
/// from `seed`. The region head comes from `target` alone.
pub fn apply_surgery(source: &WeightsFile, target: &NetworkConfig, plan: &SurgeryPlan, seed: u64) -> Result<Network> {
    plan.validate(target)?;
    target.validate()?;
    let convs: Vec<_> = target.conv_specs().copied().collect();
    if source.layers.len() != convs.len() {
        return Err(Error::Surgery(format!(
            "source has {} convolutions, target has {}",
            source.layers.len(),
            convs.len()
        )));
    }
    let mut net = Network::new(target, seed)?;
    for (i, (src, layer)) in source.layers.iter().zip(net.conv_layers_mut()).enumerate() {
        if plan.reinit_layers.contains(&i) {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1 << 32 | i as u64));
            *layer = ConvLayer::initialized(layer.spec, layer.channels, &mut rng);
        } else {
            src.write_into(layer)
                .map_err(|e| Error::Surgery(format!("convolutional layer {i}: {e}")))?;
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, RegionHeadSpec};

    fn config(classes: usize) -> NetworkConfig {
        NetworkConfig::compact(64, [4, 4, 8, 8, 8, 8], RegionHeadSpec::new(classes, vec![(1.0, 1.0); 5]))
    }

    #[test]
    fn twenty_to_fourteen_classes() {
        let source = build_network(&config(20), 1).unwrap();
        let file = WeightsFile::from_network(&source);
        let target = config(14);
        let plan = SurgeryPlan::final_layer(20, &target);
        let net = apply_surgery(&file, &target, &plan, 9).unwrap();
        let last = net.conv_layers().count() - 1;
        for (i, (a, b)) in source.conv_layers().zip(net.conv_layers()).enumerate() {
            if i < last {
                assert_eq!(a, b);
            } else {
                assert_eq!((a.spec.filters, b.spec.filters), (125, 95));
            }
        }
        assert_eq!(net.checksum(), apply_surgery(&file, &target, &plan, 9).unwrap().checksum());
    }

    #[test]
    fn plan_must_include_final_layer() {
        let target = config(3);
        let mut plan = SurgeryPlan::final_layer(3, &target);
        plan.reinit_layers.clear();
        let file = WeightsFile::from_network(&build_network(&target, 0).unwrap());
        assert!(matches!(apply_surgery(&file, &target, &plan, 0), Err(Error::Surgery(_))));
    }

    #[test]
    fn inner_mismatch_is_surgery_error() {
        let file = WeightsFile::from_network(&build_network(&config(3), 0).unwrap());
        let target = NetworkConfig::compact(64, [4, 8, 8, 8, 8, 8], RegionHeadSpec::new(2, vec![(1.0, 1.0); 5]));
        let err = apply_surgery(&file, &target, &SurgeryPlan::final_layer(3, &target), 0).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }
}
