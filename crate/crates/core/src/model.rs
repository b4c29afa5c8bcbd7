//! Whole-model configuration and parameter bundle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::CaptionerParams;
use crate::error::{Error, Result};
use crate::interaction::{InteractionConfig, InteractionParams, ScoreNorm};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_img: usize,
    pub d_obj: usize,
    /// Number of object attention groups (K).
    pub groups: usize,
    pub d_theta: usize,
    pub interaction_hidden: usize,
    pub theta_hidden: Vec<usize>,
    pub score_norm: ScoreNorm,
    /// Output width of the image projection g_φ.
    pub d_phi: usize,
    pub phi_hidden: Vec<usize>,
    pub embed: usize,
    pub att_hidden: usize,
    pub lang_hidden: usize,
    pub vocab_size: usize,
    pub use_image: bool,
    pub use_objects: bool,
    pub use_coattention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_img: 32,
            d_obj: 32,
            groups: 2,
            d_theta: 32,
            interaction_hidden: 32,
            theta_hidden: Vec::new(),
            score_norm: ScoreNorm::Row,
            d_phi: 32,
            phi_hidden: Vec::new(),
            embed: 16,
            att_hidden: 32,
            lang_hidden: 32,
            vocab_size: 4,
            use_image: true,
            use_objects: true,
            use_coattention: true,
        }
    }
}

/// The ablation rows: which visual pathways feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Img,
    Obj,
    ImgObj,
    ImgObjNoCoattn,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Img, Mode::Obj, Mode::ImgObj, Mode::ImgObjNoCoattn];

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Mode::Img => (true, false, false),
            Mode::Obj => (false, true, true),
            Mode::ImgObj => (true, true, true),
            Mode::ImgObjNoCoattn => (true, true, false),
        }
    }
}

impl ModelConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        let (img, obj, co) = mode.flags();
        self.use_image = img;
        self.use_objects = obj;
        self.use_coattention = co;
        self
    }

    pub fn interaction(&self) -> InteractionConfig {
        InteractionConfig {
            d_img: self.d_img,
            d_obj: self.d_obj,
            groups: self.groups,
            d_theta: self.d_theta,
            hidden: self.interaction_hidden,
            theta_hidden: self.theta_hidden.clone(),
            score_norm: self.score_norm,
        }
    }

    /// Width of the frame keys the temporal attention scores: projected
    /// image features, or interaction states when images are off.
    pub fn key_width(&self) -> usize {
        if self.use_image {
            self.d_phi
        } else {
            self.interaction_hidden
        }
    }

    pub fn att_input_width(&self) -> usize {
        self.lang_hidden + self.key_width() + self.embed
    }

    pub fn lang_input_width(&self) -> usize {
        let mut w = self.att_hidden;
        if self.use_image {
            w += self.d_phi;
        }
        if self.use_objects {
            w += self.interaction_hidden;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_img", self.d_img),
            ("d_obj", self.d_obj),
            ("groups", self.groups),
            ("d_theta", self.d_theta),
            ("interaction_hidden", self.interaction_hidden),
            ("d_phi", self.d_phi),
            ("embed", self.embed),
            ("att_hidden", self.att_hidden),
            ("lang_hidden", self.lang_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::validation(
                "vocab_size",
                format!("{} < 4 reserved tokens", self.vocab_size),
            ));
        }
        if !self.use_image && !self.use_objects {
            return Err(Error::validation(
                "mode",
                "at least one of use_image and use_objects must be set",
            ));
        }
        Ok(())
    }
}

/// All learned weights plus the layout that addresses them.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub interaction: InteractionParams,
    pub captioner: CaptionerParams,
}

impl Model {
    /// Seeded initialisation; the same `(config, seed)` gives identical weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let interaction = InteractionParams::init(&mut store, &config.interaction(), &mut rng)?;
        let captioner = CaptionerParams::init(&mut store, &config, &mut rng)?;
        Ok(Self {
            config,
            store,
            interaction,
            captioner,
        })
    }

    pub fn zero_all(&mut self) {
        for t in self.store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
    }
}
