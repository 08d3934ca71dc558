//! Host resource sampling for heartbeats.

use std::time::Instant;

use fedsilo_core::api::ResourceMetrics;
use sysinfo::{Networks, System};

pub struct ResourceSampler {
    system: System,
    networks: Networks,
    last: Instant,
}

impl Default for ResourceSampler {
    fn default() -> Self {
        Self::new()
    }
}

impl ResourceSampler {
    pub fn new() -> Self {
        let mut system = System::new();
        system.refresh_cpu_usage();
        system.refresh_memory();
        Self {
            system,
            networks: Networks::new_with_refreshed_list(),
            last: Instant::now(),
        }
    }

    /// CPU and network figures are averages since the previous sample.
    pub fn sample(&mut self) -> ResourceMetrics {
        self.system.refresh_cpu_usage();
        self.system.refresh_memory();
        self.networks.refresh(true);
        let elapsed = self.last.elapsed().as_secs_f64().max(1e-3);
        self.last = Instant::now();
        let (rx, tx) = self
            .networks
            .iter()
            .fold((0u64, 0u64), |(rx, tx), (_, n)| (rx + n.received(), tx + n.transmitted()));
        let cpu = f64::from(self.system.global_cpu_usage());
        ResourceMetrics {
            cpu_percent: if cpu.is_finite() { cpu.clamp(0.0, 100.0) } else { 0.0 },
            gpu_percent: None,
            mem_used_bytes: self.system.used_memory().min(self.system.total_memory()),
            mem_total_bytes: self.system.total_memory(),
            net_tx_bytes_per_s: tx as f64 / elapsed,
            net_rx_bytes_per_s: rx as f64 / elapsed,
            sampled_at: chrono::Utc::now(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_valid() {
        let mut s = ResourceSampler::new();
        for _ in 0..2 {
            let m = s.sample();
            assert_eq!(m.validate(), Ok(()));
        }
    }
}
