//! Analytical throughput model of the tile array.
//!
//! Output channels map to tiles, output pixels to the PEs of a tile and
//! 64-channel input groups to the dot lanes. A layer takes
//! `max(compute, bandwidth) + pipeline_depth` cycles, where bandwidth
//! counts every byte read through the four 64-byte read channels once.
//! Element-wise merges are treated as part of the producing layer's drain
//! and cost no cycles of their own.

use std::fmt::Write as _;

use crate::config::TileConfig;
use crate::graph::NetworkGraph;
use crate::layout;
use crate::regs::{LayerGeometry, PassSpec};

/// Throughput measured on the reference board at 200 MHz, shown for
/// comparison next to the ideal model.
pub const REFERENCE_MEASURED_TOPS: f64 = 5.0;

/// Bytes the LSU reads per cycle over all read channels.
pub const READ_BYTES_PER_CYCLE: u64 = 4 * 64;

/// Peak throughput in operations per second (two ops per MAC).
pub fn peak_ops(cfg: &TileConfig) -> f64 {
    2.0 * cfg.macs_per_cycle() as f64 * cfg.freq_hz as f64
}

pub fn peak_tops(cfg: &TileConfig) -> f64 {
    peak_ops(cfg) / 1e12
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerfOptions {
    pub bandwidth: bool,
    pub power_watts: Option<f64>,
}

impl Default for PerfOptions {
    fn default() -> Self {
        Self { bandwidth: false, power_watts: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPerf {
    pub name: String,
    pub macs: u64,
    pub compute_cycles: u64,
    pub bandwidth_cycles: u64,
    pub cycles: u64,
    pub effective_tops: f64,
    pub utilization: f64,
}

/// Cycle estimate of one convolution.
pub fn layer_cycles(name: &str, geom: &LayerGeometry, cfg: &TileConfig, opts: &PerfOptions) -> LayerPerf {
    let (oh, ow) = geom.output_hw();
    let compute = geom.ofm.div_ceil(cfg.tiles) as u64
        * geom.ifm.div_ceil(cfg.dot_width) as u64
        * geom.conv.kernel_pixels() as u64
        * (oh * ow).div_ceil(cfg.pes_per_tile) as u64;
    let read = layout::lsu_plan(geom, &PassSpec::full(geom)).read_bytes();
    let bandwidth = read.div_ceil(READ_BYTES_PER_CYCLE);
    let limit = if opts.bandwidth { compute.max(bandwidth) } else { compute };
    let cycles = limit + cfg.pipeline_depth;
    let macs = geom.macs();
    let effective = 2.0 * macs as f64 * cfg.freq_hz as f64 / cycles as f64 / 1e12;
    LayerPerf {
        name: name.to_string(),
        macs,
        compute_cycles: compute,
        bandwidth_cycles: bandwidth,
        cycles,
        effective_tops: effective,
        utilization: effective / peak_tops(cfg),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerfReport {
    pub config: String,
    pub freq_hz: u64,
    pub macs_per_cycle: u64,
    pub peak_tops: f64,
    pub bandwidth: bool,
    pub layers: Vec<LayerPerf>,
    pub total_macs: u64,
    pub total_cycles: u64,
    pub effective_tops: f64,
    pub utilization: f64,
    pub images_per_second: f64,
    /// MACs of the host layers, excluded from the totals.
    pub host_macs: u64,
    pub power_watts: Option<f64>,
    pub tops_per_watt: Option<f64>,
    pub peak_tops_per_watt: Option<f64>,
}

pub fn network_perf(graph: &NetworkGraph, cfg: &TileConfig, opts: &PerfOptions) -> PerfReport {
    let layers: Vec<LayerPerf> = graph
        .accelerator_convs()
        .into_iter()
        .map(|i| layer_cycles(&graph.nodes[i].name, &graph.geometry(i).expect("conv geometry"), cfg, opts))
        .collect();
    let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
    let total_cycles: u64 = layers.iter().map(|l| l.cycles).sum();
    let seconds = total_cycles as f64 / cfg.freq_hz as f64;
    let effective = if total_cycles == 0 { 0.0 } else { 2.0 * total_macs as f64 / seconds / 1e12 };
    let peak = peak_tops(cfg);
    let per_watt = |t: f64| opts.power_watts.filter(|&p| p > 0.0).map(|p| t / p);
    PerfReport {
        config: cfg.name.clone(),
        freq_hz: cfg.freq_hz,
        macs_per_cycle: cfg.macs_per_cycle(),
        peak_tops: peak,
        bandwidth: opts.bandwidth,
        total_macs,
        total_cycles,
        effective_tops: effective,
        utilization: effective / peak,
        images_per_second: if total_cycles == 0 { 0.0 } else { 1.0 / seconds },
        host_macs: graph.host_macs(),
        power_watts: opts.power_watts,
        tops_per_watt: per_watt(effective),
        peak_tops_per_watt: per_watt(peak),
        layers,
    }
}

pub const CSV_HEADER: &str =
    "config,freq_mhz,layer,macs,compute_cycles,bandwidth_cycles,cycles,effective_tops,utilization";

impl PerfReport {
    /// CSV rows (no header): one per layer, then a `TOTAL` row.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let mhz = self.freq_hz as f64 / 1e6;
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{mhz},{},{},{},{},{},{:.6},{:.6}",
                self.config, l.name, l.macs, l.compute_cycles, l.bandwidth_cycles, l.cycles, l.effective_tops, l.utilization
            );
        }
        let compute: u64 = self.layers.iter().map(|l| l.compute_cycles).sum();
        let bw: u64 = self.layers.iter().map(|l| l.bandwidth_cycles).sum();
        let _ = writeln!(
            out,
            "{},{mhz},TOTAL,{},{compute},{bw},{},{:.6},{:.6}",
            self.config, self.total_macs, self.total_cycles, self.effective_tops, self.utilization
        );
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}", self.csv_rows())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mhz = self.freq_hz as f64 / 1e6;
        let _ = writeln!(s, "config            {} @ {mhz} MHz", self.config);
        let _ = writeln!(s, "MAC/cycle         {}", self.macs_per_cycle);
        let _ = writeln!(s, "peak TOP/s        {:.3}", self.peak_tops);
        let _ = writeln!(s, "bandwidth model   {}", if self.bandwidth { "on" } else { "off" });
        let _ = writeln!(s, "accelerator MACs  {}", self.total_macs);
        let _ = writeln!(s, "host MACs         {} (not timed)", self.host_macs);
        let _ = writeln!(s, "cycles            {}", self.total_cycles);
        let _ = writeln!(s, "effective TOP/s   {:.3}", self.effective_tops);
        let _ = writeln!(s, "utilization       {:.2}%", 100.0 * self.utilization);
        let _ = writeln!(s, "images/s          {:.1}", self.images_per_second);
        let _ = writeln!(s, "measured TOP/s    {REFERENCE_MEASURED_TOPS:.3} (reference board, 200 MHz)");
        if let (Some(w), Some(t), Some(p)) = (self.power_watts, self.tops_per_watt, self.peak_tops_per_watt) {
            let _ = writeln!(s, "power             {w} W (user supplied)");
            let _ = writeln!(s, "TOP/s/W           {t:.3} effective, {p:.3} peak");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvParams;

    #[test]
    fn peaks() {
        let a10 = TileConfig::arria10();
        assert_eq!(a10.macs_per_cycle(), 16384);
        assert_eq!(peak_ops(&a10), 6_553_600_000_000.0);
        assert_eq!(peak_ops(&a10.clone().with_freq_hz(400_000_000)), 13_107_200_000_000.0);
        assert!((peak_tops(&TileConfig::stratix10()) - 76.0).abs() < 0.05);
    }

    #[test]
    fn layer_examples() {
        let cfg = TileConfig::arria10();
        let opts = PerfOptions::default();
        let g = LayerGeometry::conv(64, 64, 56, 56, ConvParams::square(3, 1), true);
        let l = layer_cycles("x", &g, &cfg, &opts);
        assert_eq!(l.compute_cycles, 7056);
        assert_eq!(l.macs, 115_605_504);
        assert_eq!(l.macs, 16384 * l.compute_cycles);
        let tiny = LayerGeometry::conv(64, 64, 1, 1, ConvParams::square(1, 1), false);
        assert_eq!(layer_cycles("t", &tiny, &cfg, &opts).cycles, 21);
        let seven = LayerGeometry::conv(64, 64, 7, 7, ConvParams::square(1, 1), false);
        let l = layer_cycles("s", &seven, &cfg, &opts);
        assert_eq!(l.compute_cycles, 13);
        assert!((l.macs as f64 / (16384.0 * 13.0) - 49.0 / 52.0).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_never_faster() {
        let cfg = TileConfig::arria10();
        let g = LayerGeometry::conv(512, 2048, 7, 7, ConvParams::square(1, 1), false);
        let ideal = layer_cycles("x", &g, &cfg, &PerfOptions::default());
        let bw = layer_cycles("x", &g, &cfg, &PerfOptions { bandwidth: true, power_watts: None });
        assert!(bw.cycles >= ideal.cycles);
    }
}
