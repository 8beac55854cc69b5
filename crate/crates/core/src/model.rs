//! Encoder, U-Net processor and decoder assembled into a one-step predictor.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graphs::{
    build_downsample, build_grid2mesh, build_mesh2grid, build_upsample, BipartiteGraph, EDGE_EMBEDDING_DIM,
};
use crate::grid::{state_manifest, static_manifest, GridField, GridSpec, INPUT_CHANNELS, STATE_CHANNELS};
use crate::healpix::MeshLevel;
use crate::nn::layers::{AttentionConfig, LayerNorm, Linear, VitBlock, INIT_STD};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::training::NormStats;
use crate::windowing::{build_shifted_windows, build_windows, PaddedWindows, WindowPartition};

/// Rollouts stop at ten days of six-hour steps.
pub const MAX_ROLLOUT_STEPS: usize = 40;

const STATE_MEAN: &str = "norm.state.mean";
const STATE_STD: &str = "norm.state.std";
const STATIC_MEAN: &str = "norm.static.mean";
const STATIC_STD: &str = "norm.static.std";
const STATICS: &str = "data.statics";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub fine_level: u8,
    /// Window parameter on the fine mesh, clamped to the level.
    pub window: u8,
    /// Window parameter on the coarse mesh, clamped to the level.
    pub coarse_window: u8,
    pub latent: usize,
    pub processor_depth: usize,
    pub head_dim: usize,
    /// One shared embedding per graph instead of one per edge.
    pub tie_edge_embeddings: bool,
}

impl ModelConfig {
    /// Published configuration: 721x1440 grid, n=7, C=256, 48 coarse blocks.
    pub fn full_scale() -> Self {
        ModelConfig {
            grid: GridSpec::new(721, 1440).expect("valid grid"),
            fine_level: 7,
            window: 3,
            coarse_window: 3,
            latent: 256,
            processor_depth: 48,
            head_dim: 32,
            tie_edge_embeddings: false,
        }
    }

    /// Desk configuration used by the learnability experiment.
    pub fn desk() -> Self {
        ModelConfig {
            grid: GridSpec::new(46, 90).expect("valid grid"),
            fine_level: 3,
            window: 3,
            coarse_window: 3,
            latent: 16,
            processor_depth: 4,
            head_dim: 8,
            tie_edge_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if self.fine_level < 1 {
            return bad("fine_level must be at least 1".into());
        }
        MeshLevel::try_new(self.fine_level)?;
        if self.window < 1 || self.coarse_window < 1 {
            return bad("window parameters must be at least 1".into());
        }
        if self.latent == 0 || self.head_dim == 0 || !self.latent.is_multiple_of(self.head_dim) {
            return bad(format!(
                "latent {} is not a multiple of head_dim {}",
                self.latent, self.head_dim
            ));
        }
        if !self.processor_depth.is_multiple_of(2) {
            return bad(format!("processor_depth {} must be even", self.processor_depth));
        }
        Ok(())
    }

    pub fn fine(&self) -> MeshLevel {
        MeshLevel::new(self.fine_level)
    }

    pub fn coarse(&self) -> MeshLevel {
        MeshLevel::new(self.fine_level - 1)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "grid {} level {} C {} depth {} head_dim {} windows {}/{}",
            self.grid,
            self.fine_level,
            self.latent,
            self.processor_depth,
            self.head_dim,
            self.window,
            self.coarse_window
        )
    }
}

/// Plain and shifted layouts for one mesh level.
fn layouts(level: MeshLevel, w: u8) -> Result<[Arc<PaddedWindows>; 2]> {
    if level.n() == 0 {
        let g = Arc::new(WindowPartition::global(level).padded());
        return Ok([Arc::clone(&g), g]);
    }
    let w = w.min(level.n());
    Ok([
        Arc::new(build_windows(level, w)?.padded()),
        Arc::new(build_shifted_windows(level, w)?.padded()),
    ])
}

/// Edge lists of one bipartite graph in the form the tape consumes.
#[derive(Clone, Debug)]
struct EdgeIndex {
    sources: Arc<Vec<u32>>,
    targets: Arc<Vec<u32>>,
    /// Row of the embedding table used by each edge.
    embedding_rows: Arc<Vec<u32>>,
    target_count: usize,
}

impl EdgeIndex {
    fn new(g: &BipartiteGraph, tied: bool) -> Self {
        let e = g.num_edges();
        EdgeIndex {
            sources: Arc::new(g.sources().to_vec()),
            targets: Arc::new(g.targets().to_vec()),
            embedding_rows: Arc::new(if tied { vec![0; e] } else { (0..e as u32).collect() }),
            target_count: g.target_count(),
        }
    }

    fn table_rows(&self, tied: bool) -> usize {
        if tied {
            1
        } else {
            self.sources.len()
        }
    }
}

/// `Linear(LN(sum over incoming edges of [embedding, source state]))`.
#[derive(Clone, Debug)]
struct GraphBlock {
    edges: EdgeIndex,
    embedding: ParamId,
    norm: LayerNorm,
    linear: Linear,
}

impl GraphBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        edges: EdgeIndex,
        tied: bool,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let embedding = store.add_weight(
            &format!("{name}.edge_embedding"),
            &[edges.table_rows(tied), EDGE_EMBEDDING_DIM],
            INIT_STD,
            rng,
        )?;
        let width = EDGE_EMBEDDING_DIM + d_in;
        Ok(GraphBlock {
            embedding,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
            linear: Linear::new(store, &format!("{name}.linear"), width, d_out, true, rng)?,
            edges,
        })
    }

    fn forward(&self, tape: &mut Tape, source: Var) -> Result<Var> {
        let table = tape.param(self.embedding);
        let e = tape.gather_rows(table, Arc::clone(&self.edges.embedding_rows))?;
        let s = tape.gather_rows(source, Arc::clone(&self.edges.sources))?;
        let cat = tape.concat(&[e, s])?;
        let summed = tape.scatter_sum(cat, Arc::clone(&self.edges.targets), self.edges.target_count)?;
        let normed = self.norm.forward(tape, summed)?;
        self.linear.forward(tape, normed)
    }
}

fn blocks(
    store: &mut ParamStore,
    prefix: &str,
    n: usize,
    cfg: AttentionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<VitBlock>> {
    (0..n)
        .map(|i| VitBlock::new(store, &format!("{prefix}.{i}"), cfg, rng))
        .collect()
}

#[derive(Clone, Debug)]
struct Encoder {
    edges: EdgeIndex,
    embedding: ParamId,
    embed: Linear,
    norm: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Processor {
    fine: Vec<VitBlock>,
    down: GraphBlock,
    coarse: Vec<VitBlock>,
    up: GraphBlock,
    post: Vec<VitBlock>,
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    processor: Processor,
    decoder: GraphBlock,
    fine_layouts: [Arc<PaddedWindows>; 2],
    coarse_layouts: [Arc<PaddedWindows>; 2],
    row_weights_cache: Option<Arc<Vec<f64>>>,
}

impl Model {
    /// Builds graphs, window layouts and freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (fine, coarse) = (config.fine(), config.coarse());
        let tied = config.tie_edge_embeddings;
        let c = config.latent;

        let g2m = EdgeIndex::new(&build_grid2mesh(&config.grid, fine), tied);
        let encoder = Encoder {
            embedding: store.add_weight(
                "encoder.edge_embedding",
                &[g2m.table_rows(tied), EDGE_EMBEDDING_DIM],
                INIT_STD,
                &mut rng,
            )?,
            embed: Linear::new(
                &mut store,
                "encoder.embed",
                EDGE_EMBEDDING_DIM + INPUT_CHANNELS,
                c,
                true,
                &mut rng,
            )?,
            norm: LayerNorm::new(&mut store, "encoder.norm", c)?,
            out: Linear::new(&mut store, "encoder.out", c, c, true, &mut rng)?,
            edges: g2m,
        };

        let narrow = AttentionConfig::for_dim(c, config.head_dim)?;
        let wide = AttentionConfig::for_dim(2 * c, config.head_dim)?;
        let fine_blocks = blocks(&mut store, "processor.fine", 2, narrow, &mut rng)?;
        let down = GraphBlock::new(
            &mut store,
            "processor.down",
            EdgeIndex::new(&build_downsample(fine)?, tied),
            tied,
            c,
            2 * c,
            &mut rng,
        )?;
        let coarse_blocks = blocks(&mut store, "processor.coarse", config.processor_depth, wide, &mut rng)?;
        let up = GraphBlock::new(
            &mut store,
            "processor.up",
            EdgeIndex::new(&build_upsample(fine)?, tied),
            tied,
            2 * c,
            c,
            &mut rng,
        )?;
        let post = blocks(&mut store, "processor.post", 2, wide, &mut rng)?;
        let decoder = GraphBlock::new(
            &mut store,
            "decoder",
            EdgeIndex::new(&build_mesh2grid(&config.grid, fine), tied),
            tied,
            2 * c,
            STATE_CHANNELS,
            &mut rng,
        )?;

        let g = config.grid.num_nodes();
        store.add(STATE_MEAN, Tensor::zeros(&[STATE_CHANNELS]), false, false)?;
        store.add(
            STATE_STD,
            Tensor::new(vec![STATE_CHANNELS], vec![1.0; STATE_CHANNELS])?,
            false,
            false,
        )?;
        store.add(STATIC_MEAN, Tensor::zeros(&[2]), false, false)?;
        store.add(STATIC_STD, Tensor::new(vec![2], vec![1.0; 2])?, false, false)?;
        store.add(STATICS, Tensor::zeros(&[2, g]), false, false)?;

        Ok(Model {
            fine_layouts: layouts(fine, config.window)?,
            coarse_layouts: layouts(coarse, config.coarse_window)?,
            config,
            params: store,
            encoder,
            processor: Processor {
                fine: fine_blocks,
                down,
                coarse: coarse_blocks,
                up,
                post,
            },
            decoder,
            row_weights_cache: None,
        })
    }

    /// Rebuilds the model described by `config` and copies every parameter
    /// (including normalization statistics and statics) from `saved`.
    pub fn from_params(config: ModelConfig, saved: &ParamStore) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        m.params.load_from(saved)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Trainable scalars outside the edge embedding tables.
    pub fn parameter_count_without_edges(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable && !p.name.ends_with(".edge_embedding"))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn set_norm_stats(&mut self, state: &NormStats, statics: &NormStats) -> Result<()> {
        state.expect_manifest(&state_manifest())?;
        statics.expect_manifest(&static_manifest())?;
        for (name, values) in [
            (STATE_MEAN, state.mean()),
            (STATE_STD, state.std()),
            (STATIC_MEAN, statics.mean()),
            (STATIC_STD, statics.std()),
        ] {
            let id = self.params.id(name).expect("registered");
            self.params.get_mut(id).tensor.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    pub fn state_stats(&self) -> NormStats {
        self.stats(STATE_MEAN, STATE_STD, state_manifest())
    }

    pub fn static_stats(&self) -> NormStats {
        self.stats(STATIC_MEAN, STATIC_STD, static_manifest())
    }

    fn stats(&self, mean: &str, std: &str, manifest: Vec<String>) -> NormStats {
        let get = |n: &str| {
            self.params
                .get(self.params.id(n).expect("registered"))
                .tensor
                .data()
                .to_vec()
        };
        NormStats::new(manifest, get(mean), get(std)).expect("stored statistics are valid")
    }

    /// Stores the static fields so a checkpoint is self-contained.
    pub fn set_statics(&mut self, statics: &GridField) -> Result<()> {
        statics.expect_manifest(&static_manifest(), "statics")?;
        self.check_grid(statics, "statics")?;
        let id = self.params.id(STATICS).expect("registered");
        self.params
            .get_mut(id)
            .tensor
            .data_mut()
            .copy_from_slice(statics.data());
        Ok(())
    }

    pub fn statics(&self) -> GridField {
        let t = &self.params.get(self.params.id(STATICS).expect("registered")).tensor;
        GridField::new(self.config.grid, static_manifest(), t.data().to_vec()).expect("stored statics are valid")
    }

    fn check_grid(&self, f: &GridField, what: &str) -> Result<()> {
        if f.grid() != self.config.grid {
            return Err(Error::InvalidGrid(format!(
                "{what} is on a {} grid, model expects {}",
                f.grid(),
                self.config.grid
            )));
        }
        Ok(())
    }

    /// Grid features `[G, 110]` to mesh latents `[M, C]`.
    pub fn encode(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let enc = &self.encoder;
        let table = tape.param(enc.embedding);
        // The grid-to-mesh graph has exactly one edge per grid node.
        let e = tape.gather_rows(table, Arc::clone(&enc.edges.embedding_rows))?;
        let x = tape.gather_rows(features, Arc::clone(&enc.edges.sources))?;
        let cat = tape.concat(&[e, x])?;
        let h = enc.embed.forward(tape, cat)?;
        let h = tape.gelu(h);
        let m = tape.scatter_sum(h, Arc::clone(&enc.edges.targets), enc.edges.target_count)?;
        let m = enc.norm.forward(tape, m)?;
        enc.out.forward(tape, m)
    }

    /// `[M, C]` to `[M, 2C]`.
    pub fn process(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        let p = &self.processor;
        let mut x = m;
        for (i, b) in p.fine.iter().enumerate() {
            x = b.forward(tape, x, &self.fine_layouts[i % 2])?;
        }
        let skip = x;
        let mut y = p.down.forward(tape, x)?;
        for (i, b) in p.coarse.iter().enumerate() {
            y = b.forward(tape, y, &self.coarse_layouts[i % 2])?;
        }
        let up = p.up.forward(tape, y)?;
        let mut z = tape.concat(&[up, skip])?;
        for (i, b) in p.post.iter().enumerate() {
            z = b.forward(tape, z, &self.fine_layouts[i % 2])?;
        }
        Ok(z)
    }

    /// `[M, 2C]` to normalized state rows `[G, 54]`.
    pub fn decode(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        self.decoder.forward(tape, m)
    }

    /// One step on normalized node-major inputs: `prev`, `cur` are `[G, 54]`,
    /// `statics` is `[G, 2]`. Returns the normalized next state.
    pub fn step(&self, tape: &mut Tape, prev: Var, cur: Var, statics: Var) -> Result<Var> {
        let features = tape.concat(&[prev, cur, statics])?;
        let m = self.encode(tape, features)?;
        let m = self.process(tape, m)?;
        self.decode(tape, m)
    }

    /// Normalized node-major rows of a raw state field.
    pub fn normalize_state(&self, f: &GridField) -> Result<Tensor> {
        self.check_grid(f, "state")?;
        let rows = self.state_stats().normalize_node_major(f)?;
        Tensor::matrix(self.config.grid.num_nodes(), STATE_CHANNELS, rows)
    }

    pub fn normalize_statics(&self, f: &GridField) -> Result<Tensor> {
        self.check_grid(f, "statics")?;
        let rows = self.static_stats().normalize_node_major(f)?;
        Tensor::matrix(self.config.grid.num_nodes(), 2, rows)
    }

    pub fn denormalize_state(&self, rows: &Tensor) -> Result<GridField> {
        self.state_stats().denormalize_node_major(self.config.grid, rows.data())
    }

    /// Raw-unit single step.
    pub fn forward_step(&self, x_t: &GridField, x_prev: &GridField, statics: &GridField) -> Result<GridField> {
        x_t.expect_manifest(&state_manifest(), "current state")?;
        x_prev.expect_manifest(&state_manifest(), "previous state")?;
        x_t.check_finite("current state")?;
        x_prev.check_finite("previous state")?;
        statics.check_finite("statics")?;
        let (p, c, s) = (
            self.normalize_state(x_prev)?,
            self.normalize_state(x_t)?,
            self.normalize_statics(statics)?,
        );
        let out = self.step_tensors(p, c, &s)?;
        self.denormalize_state(&out)
    }

    fn step_tensors(&self, prev: Tensor, cur: Tensor, statics: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let (p, c, s) = (tape.input(prev), tape.input(cur), tape.input(statics.clone()));
        let y = self.step(&mut tape, p, c, s)?;
        Ok(tape.value(y).clone())
    }

    /// Autoregressive forecast of `k` steps. Each step feeds on the two
    /// latest states, switching from the given initial states to predictions.
    pub fn rollout(
        &self,
        x_t0: &GridField,
        x_prev: &GridField,
        statics: &GridField,
        k: usize,
    ) -> Result<Vec<GridField>> {
        if k == 0 || k > MAX_ROLLOUT_STEPS {
            return Err(Error::InvalidValue(format!(
                "rollout length {k} outside 1..={MAX_ROLLOUT_STEPS}"
            )));
        }
        x_t0.expect_manifest(&state_manifest(), "initial state")?;
        x_prev.expect_manifest(&state_manifest(), "previous initial state")?;
        x_t0.check_finite("initial state")?;
        x_prev.check_finite("previous initial state")?;
        statics.check_finite("statics")?;
        let s = self.normalize_statics(statics)?;
        let mut prev = self.normalize_state(x_prev)?;
        let mut cur = self.normalize_state(x_t0)?;
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let next = self.step_tensors(prev, cur.clone(), &s)?;
            out.push(self.denormalize_state(&next)?);
            prev = cur;
            cur = next;
        }
        Ok(out)
    }

    /// Per-node latitude weights of the model grid as loss row weights.
    pub fn row_weights(&mut self) -> Arc<Vec<f64>> {
        if let Some(w) = &self.row_weights_cache {
            return Arc::clone(w);
        }
        let w = Arc::new(crate::evaluation::node_weights(&self.config.grid));
        self.row_weights_cache = Some(Arc::clone(&w));
        w
    }

    /// Zeroes the output projections of every transformer block.
    pub fn zero_block_outputs(&mut self) {
        let blocks: Vec<VitBlock> = self
            .processor
            .fine
            .iter()
            .chain(&self.processor.coarse)
            .chain(&self.processor.post)
            .copied()
            .collect();
        for b in blocks {
            b.zero_output_projections(&mut self.params);
        }
    }

    /// Downsample block alone, `[M, C]` to `[M/4, 2C]`.
    pub fn downsample(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        self.processor.down.forward(tape, m)
    }

    /// Upsample block alone, `[M/4, 2C]` to `[M, C]`.
    pub fn upsample(&self, tape: &mut Tape, m: Var) -> Result<Var> {
        self.processor.up.forward(tape, m)
    }
}
