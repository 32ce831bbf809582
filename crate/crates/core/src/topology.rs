//! Interconnect description and transfer accounting.
//!
//! A [`Topology`] groups device ranks into PCIe domains and PCIe domains into
//! I/O hubs (IOHs). Peer-to-peer transfers are possible only between devices
//! under the same IOH; anything else between two devices has to be staged
//! through host memory. Every transfer performed by the collectives is
//! recorded in a [`TransferLedger`], which replaces wall-clock measurements
//! as the observable quantity of the simulation.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::runtime::Rank;

/// One end of a transfer: the host or a device rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Host,
    Device(Rank),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Host => write!(f, "host"),
            Endpoint::Device(r) => write!(f, "dev{r}"),
        }
    }
}

/// Classification of a transfer between two endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PathKind {
    /// Source and destination are the same device.
    OnDevice,
    /// Direct device-to-device access; both devices share an IOH.
    PeerToPeer,
    /// Device-to-device bounce through host memory (different IOHs).
    HostStaged,
    HostToDevice,
    DeviceToHost,
}

impl PathKind {
    pub const ALL: [PathKind; 5] = [
        PathKind::OnDevice,
        PathKind::PeerToPeer,
        PathKind::HostStaged,
        PathKind::HostToDevice,
        PathKind::DeviceToHost,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PathKind::OnDevice => "on_device",
            PathKind::PeerToPeer => "peer_to_peer",
            PathKind::HostStaged => "host_staged",
            PathKind::HostToDevice => "host_to_device",
            PathKind::DeviceToHost => "device_to_host",
        }
    }
}

/// PCIe-domain / IOH layout of the simulated node.
///
/// Nominal per-path bandwidths can be attached for reporting; they never
/// influence behaviour, only what benchmark reports print.
#[derive(Debug, Clone)]
pub struct Topology {
    /// PCIe domain of each rank (rank-indexed).
    pcie_domain_of: Vec<usize>,
    /// IOH of each PCIe domain (domain-indexed).
    ioh_of_domain: Vec<usize>,
    /// Optional nominal bandwidth per path class in bytes/second, reporting only.
    pub nominal_bandwidth: HashMap<PathKind, f64>,
}

impl Topology {
    /// All devices in one PCIe domain under one IOH.
    pub fn flat(device_count: usize) -> Topology {
        Topology {
            pcie_domain_of: vec![0; device_count],
            ioh_of_domain: vec![0],
            nominal_bandwidth: HashMap::new(),
        }
    }

    /// Build from explicit rank->domain and domain->IOH maps.
    pub fn new(pcie_domain_of: Vec<usize>, ioh_of_domain: Vec<usize>) -> Result<Topology> {
        if pcie_domain_of.is_empty() {
            return Err(Error::config("topology must describe at least one device"));
        }
        let domains = ioh_of_domain.len();
        for (rank, &d) in pcie_domain_of.iter().enumerate() {
            if d >= domains {
                return Err(Error::config(format!(
                    "rank {rank} assigned to PCIe domain {d}, but only {domains} domains are declared"
                )));
            }
        }
        Ok(Topology {
            pcie_domain_of,
            ioh_of_domain,
            nominal_bandwidth: HashMap::new(),
        })
    }

    /// Parse the flat key-value topology file format:
    ///
    /// ```text
    /// devices = 8
    /// pcie_domains = 0,0,1,1,2,2,3,3
    /// ioh = 0,0,1,1
    /// ```
    ///
    /// Lines starting with `#` are comments. Missing `pcie_domains`/`ioh`
    /// default to a flat layout.
    pub fn parse(text: &str) -> Result<Topology> {
        let mut devices: Option<usize> = None;
        let mut domains: Option<Vec<usize>> = None;
        let mut iohs: Option<Vec<usize>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("topology line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "devices" => {
                    devices = Some(value.parse().map_err(|_| {
                        Error::config(format!("topology: bad device count {value:?}"))
                    })?)
                }
                "pcie_domains" => domains = Some(parse_id_list(value, "pcie_domains")?),
                "ioh" => iohs = Some(parse_id_list(value, "ioh")?),
                other => {
                    return Err(Error::config(format!("topology: unknown key {other:?}")));
                }
            }
        }
        let devices =
            devices.ok_or_else(|| Error::config("topology: missing `devices` key"))?;
        if devices == 0 {
            return Err(Error::config("topology: `devices` must be positive"));
        }
        let domains = domains.unwrap_or_else(|| vec![0; devices]);
        if domains.len() != devices {
            return Err(Error::config(format!(
                "topology: pcie_domains lists {} entries for {} devices",
                domains.len(),
                devices
            )));
        }
        let max_domain = domains.iter().copied().max().unwrap_or(0);
        let iohs = iohs.unwrap_or_else(|| vec![0; max_domain + 1]);
        if iohs.len() <= max_domain {
            return Err(Error::config(format!(
                "topology: ioh lists {} entries but domain ids go up to {}",
                iohs.len(),
                max_domain
            )));
        }
        Topology::new(domains, iohs)
    }

    pub fn device_count(&self) -> usize {
        self.pcie_domain_of.len()
    }

    pub fn pcie_domain(&self, rank: Rank) -> Result<usize> {
        self.pcie_domain_of
            .get(rank)
            .copied()
            .ok_or_else(|| Error::usage(format!("rank {rank} outside topology")))
    }

    pub fn ioh(&self, rank: Rank) -> Result<usize> {
        Ok(self.ioh_of_domain[self.pcie_domain(rank)?])
    }

    /// True when the two devices can reach each other without host staging.
    pub fn peer_accessible(&self, a: Rank, b: Rank) -> Result<bool> {
        Ok(self.ioh(a)? == self.ioh(b)?)
    }

    /// Classify the path a transfer between `src` and `dst` takes.
    pub fn resolve_path(&self, src: Endpoint, dst: Endpoint) -> Result<PathKind> {
        match (src, dst) {
            (Endpoint::Host, Endpoint::Host) => Err(Error::usage(
                "host-to-host is not a device transfer",
            )),
            (Endpoint::Host, Endpoint::Device(r)) => {
                self.pcie_domain(r)?;
                Ok(PathKind::HostToDevice)
            }
            (Endpoint::Device(r), Endpoint::Host) => {
                self.pcie_domain(r)?;
                Ok(PathKind::DeviceToHost)
            }
            (Endpoint::Device(a), Endpoint::Device(b)) => {
                if a == b {
                    self.pcie_domain(a)?;
                    Ok(PathKind::OnDevice)
                } else if self.peer_accessible(a, b)? {
                    Ok(PathKind::PeerToPeer)
                } else {
                    Ok(PathKind::HostStaged)
                }
            }
        }
    }

    /// Ranks of `group` clustered by IOH, each cluster ascending; clusters
    /// ordered by their lowest rank. The first rank of a cluster acts as the
    /// cluster's leader in the reduction collectives.
    pub fn ioh_groups(&self, ranks: &[Rank]) -> Result<Vec<Vec<Rank>>> {
        let mut by_ioh: Vec<(usize, Vec<Rank>)> = Vec::new();
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        for rank in sorted {
            let ioh = self.ioh(rank)?;
            match by_ioh.iter_mut().find(|(i, _)| *i == ioh) {
                Some((_, v)) => v.push(rank),
                None => by_ioh.push((ioh, vec![rank])),
            }
        }
        Ok(by_ioh.into_iter().map(|(_, v)| v).collect())
    }
}

fn parse_id_list(value: &str, key: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::config(format!("topology: bad {key} entry {s:?}")))
        })
        .collect()
}

/// Cumulative bytes and transfer count for one (src, dst, path) triple.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerEntry {
    pub bytes: u64,
    pub count: u64,
}

/// Totals returned by ledger queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LedgerTotals {
    pub bytes: u64,
    pub count: u64,
}

/// Byte accounting for every transfer the collectives perform.
///
/// A host-staged device-to-device move is recorded once, under
/// [`PathKind::HostStaged`], with the payload size; the ledger tracks payload
/// bytes per path class, not PCIe crossings.
#[derive(Debug, Default)]
pub struct TransferLedger {
    records: Mutex<HashMap<(Endpoint, Endpoint, PathKind), LedgerEntry>>,
    host_combines: AtomicU64,
}

impl TransferLedger {
    pub fn new() -> TransferLedger {
        TransferLedger::default()
    }

    pub fn record(&self, src: Endpoint, dst: Endpoint, path: PathKind, bytes: u64) {
        let mut records = self.records.lock().unwrap();
        let entry = records.entry((src, dst, path)).or_default();
        entry.bytes += bytes;
        entry.count += 1;
    }

    /// Mark that a reduction needed a final combine on the host.
    pub fn record_host_combine(&self) {
        self.host_combines.fetch_add(1, Ordering::Relaxed);
    }

    pub fn host_combines(&self) -> u64 {
        self.host_combines.load(Ordering::Relaxed)
    }

    /// Totals over all records matching `filter`.
    pub fn query(&self, filter: impl Fn(Endpoint, Endpoint, PathKind) -> bool) -> LedgerTotals {
        let records = self.records.lock().unwrap();
        let mut totals = LedgerTotals::default();
        for (&(src, dst, path), entry) in records.iter() {
            if filter(src, dst, path) {
                totals.bytes += entry.bytes;
                totals.count += entry.count;
            }
        }
        totals
    }

    pub fn by_path(&self, path: PathKind) -> LedgerTotals {
        self.query(|_, _, p| p == path)
    }

    pub fn total(&self) -> LedgerTotals {
        self.query(|_, _, _| true)
    }

    /// Totals of transfers arriving at `endpoint`.
    pub fn into_endpoint(&self, endpoint: Endpoint) -> LedgerTotals {
        self.query(|_, dst, _| dst == endpoint)
    }

    /// Snapshot of all records, sorted for deterministic reporting.
    pub fn snapshot(&self) -> Vec<(Endpoint, Endpoint, PathKind, LedgerEntry)> {
        let records = self.records.lock().unwrap();
        let mut rows: Vec<_> = records
            .iter()
            .map(|(&(s, d, p), &e)| (s, d, p, e))
            .collect();
        rows.sort_by_key(|&(s, d, p, _)| (p, s, d));
        rows
    }

    /// Clear all records. Accumulation is otherwise monotone.
    pub fn reset(&self) {
        self.records.lock().unwrap().clear();
        self.host_combines.store(0, Ordering::Relaxed);
    }
}
