//! The trainable lens: point embedding followed by a Perceiver whose latents
//! become the ViT input sequence.

mod embed;
mod perceiver;

pub use embed::{init_point_embed, point_embed, PointEmbedConfig, EMBED_PREFIX};
pub use perceiver::{
    init_perceiver, perceiver_block, perceiver_forward, set_prefix, PerceiverConfig, LATENTS,
    PERCEIVER_PREFIX,
};

/// Trainable parameters of point embedding, latent array and Perceiver blocks.
pub fn lens_param_count(embed: &PointEmbedConfig, perceiver: &PerceiverConfig) -> usize {
    embed.param_count()
        + perceiver.n_latents * perceiver.latent_dim
        + perceiver.param_sets() * perceiver.block_param_count(embed.token_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn shared_count_is_depth_independent() {
        let e = PointEmbedConfig::default();
        let base = PerceiverConfig {
            depth: 2,
            share_weights: false,
            ..PerceiverConfig::default()
        };
        let two = lens_param_count(&e, &base);
        for depth in [4, 6, 8] {
            let shared = PerceiverConfig {
                depth,
                share_weights: true,
                ..base
            };
            assert_eq!(lens_param_count(&e, &shared), two);
            let unshared = PerceiverConfig {
                depth,
                share_weights: false,
                ..base
            };
            assert!(lens_param_count(&e, &unshared) > two);
        }
    }

    #[test]
    fn doubling_latents_adds_m_times_d() {
        let e = PointEmbedConfig::default();
        let p = PerceiverConfig::default();
        let p2 = PerceiverConfig {
            n_latents: 2 * p.n_latents,
            ..p
        };
        assert_eq!(
            lens_param_count(&e, &p2) - lens_param_count(&e, &p),
            p.n_latents * p.latent_dim
        );
    }

    #[test]
    fn formula_matches_registered_tensors() {
        for (self_attn, depth, share) in [(0, 1, false), (1, 3, false), (2, 5, true)] {
            let e = PointEmbedConfig {
                hidden_dim: 3,
                center_dim: 2,
                token_dim: 5,
            };
            let p = PerceiverConfig {
                n_latents: 3,
                latent_dim: 4,
                depth,
                share_weights: share,
                n_heads: 2,
                self_attn_per_block: self_attn,
                mlp_ratio: 1.5,
            };
            let mut store = ParamStore::new();
            init_point_embed(&mut store, &e, 0);
            init_perceiver(&mut store, &p, e.token_dim, 0);
            assert_eq!(store.trainable_count(), lens_param_count(&e, &p));
        }
    }

    #[test]
    fn config_validation() {
        let bad = PerceiverConfig {
            depth: 1,
            share_weights: true,
            ..PerceiverConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PerceiverConfig {
            n_heads: 3,
            ..PerceiverConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(PerceiverConfig::default().validate().is_ok());
    }
}
