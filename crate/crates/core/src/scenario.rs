//! Ready-made cluster setups for the matrix-multiplication benchmark.

use std::sync::Arc;

use crate::asm::{assemble, Program};
use crate::cluster::{Cluster, ClusterConfig, ClusterError, RunStatus};
use crate::hmr::Mode;
use crate::workload::{matmul_main, runtime, MatmulData, MatmulLayout, MatmulSpec, RuntimeOptions};

/// Groups covering the whole cluster in `mode`.
pub fn uniform_groups(n: usize, mode: Mode) -> Vec<(usize, Mode)> {
    match mode {
        Mode::Independent => Vec::new(),
        m => (0..n / m.group_size()).map(|g| (g, m)).collect(),
    }
}

pub fn program_for(cfg: &ClusterConfig, main_src: &str) -> Result<Program, ClusterError> {
    let opts = RuntimeOptions {
        rapid: cfg.options.rapid_recovery_enabled,
    };
    let src = runtime(&cfg.map, opts) + main_src;
    assemble(&src, cfg.core.boot_addr).map_err(|e| ClusterError::Config(format!("assembler: {e}")))
}

/// A prepared benchmark run.
#[derive(Clone)]
pub struct MatmulScenario {
    pub cluster: Cluster,
    pub layout: MatmulLayout,
    pub expected: Vec<u32>,
    pub mode: Mode,
}

impl MatmulScenario {
    pub fn new(
        cfg: &ClusterConfig,
        mode: Mode,
        spec: MatmulSpec,
        data_seed: u64,
    ) -> Result<Self, ClusterError> {
        if !mode.available(cfg.n_cores) {
            return Err(ClusterError::Config(format!(
                "{mode:?} needs a core count divisible by {}",
                mode.group_size()
            )));
        }
        let layout = MatmulLayout::new(cfg.map.tcdm_base, spec);
        let nv = cfg.n_cores / mode.group_size();
        let program = program_for(cfg, &matmul_main(&layout, nv))?;
        let data = MatmulData::generate(layout, data_seed);
        let cluster = Cluster::new(
            *cfg,
            Arc::new(program),
            &data.blocks(),
            &uniform_groups(cfg.n_cores, mode),
        )?;
        Ok(MatmulScenario {
            cluster,
            layout,
            expected: data.expected(),
            mode,
        })
    }

    pub fn run(&mut self, max_cycles: u64) -> RunStatus {
        self.cluster.run(max_cycles)
    }

    pub fn result(&self) -> Vec<u32> {
        let (addr, len) = self.layout.result();
        self.cluster.read_words(addr, len)
    }

    pub fn result_digest(&self) -> String {
        Cluster::digest_words(&self.result())
    }

    pub fn correct(&self) -> bool {
        self.result() == self.expected
    }
}
