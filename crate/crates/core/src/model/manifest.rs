use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::Deserialize;

use super::brick_ref::is_ident;
use super::path::{self, paths_overlap};
use super::yaml::{scalar, syntax, utf8};
use super::{ModelError, Result};

/// One pipeline stage: a shell command with declared inputs and outputs.
///
/// Paths are workspace-relative and normalized; a trailing `/` marks a
/// directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub cmd: String,
    pub deps: Vec<String>,
    pub outs: Vec<String>,
}

impl Stage {
    pub fn new<D, O>(name: &str, cmd: &str, deps: D, outs: O) -> Result<Self>
    where
        D: IntoIterator,
        D::Item: AsRef<str>,
        O: IntoIterator,
        O::Item: AsRef<str>,
    {
        let normalize_all = |items: Vec<String>| -> Result<Vec<String>> {
            items.iter().map(|p| path::normalize(p)).collect()
        };
        let stage = Self {
            name: name.to_string(),
            cmd: cmd.to_string(),
            deps: normalize_all(deps.into_iter().map(|d| d.as_ref().to_string()).collect())?,
            outs: normalize_all(outs.into_iter().map(|o| o.as_ref().to_string()).collect())?,
        };
        stage.validate()?;
        Ok(stage)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |reason: String| ModelError::InvalidStage {
            stage: self.name.clone(),
            reason,
        };
        if !is_ident(&self.name) {
            return Err(invalid("stage names must match [A-Za-z0-9._-]+".into()));
        }
        for (i, a) in self.outs.iter().enumerate() {
            if self.outs[..i].iter().any(|b| paths_overlap(a, b)) {
                return Err(invalid(format!("output {a:?} overlaps another output")));
            }
        }
        for (i, a) in self.deps.iter().enumerate() {
            if self.deps[..i].iter().any(|b| path::key(a) == path::key(b)) {
                return Err(invalid(format!("dependency {a:?} is listed twice")));
            }
            if let Some(out) = self.outs.iter().find(|o| paths_overlap(a, o)) {
                return Err(invalid(format!("{a:?} is both a dependency and an output ({out:?})")));
            }
        }
        Ok(())
    }

    /// True when no dependency is declared; such stages run on every repro.
    pub fn always_runs(&self) -> bool {
        self.deps.is_empty()
    }
}

/// The ordered set of stages that builds a brick.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    stages: IndexMap<String, Stage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    stages: Option<IndexMap<String, RawStage>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    cmd: String,
    #[serde(default)]
    deps: Option<Vec<String>>,
    #[serde(default)]
    outs: Option<Vec<String>>,
}

impl Manifest {
    /// Builds a manifest from stages in order, checking every invariant.
    pub fn new(stages: impl IntoIterator<Item = Stage>) -> Result<Self> {
        let mut map = IndexMap::new();
        for stage in stages {
            stage.validate()?;
            let name = stage.name.clone();
            if map.insert(name.clone(), stage).is_some() {
                return Err(ModelError::InvalidStage {
                    stage: name,
                    reason: "stage defined twice".into(),
                });
            }
        }
        let manifest = Self { stages: map };
        manifest.check_outputs()?;
        manifest.topo_order()?;
        Ok(manifest)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let text = utf8(bytes)?;
        let raw: RawManifest = serde_yaml::from_str(text).map_err(syntax)?;
        let stages = raw
            .stages
            .unwrap_or_default()
            .into_iter()
            .map(|(name, s)| {
                Stage::new(
                    &name,
                    &s.cmd,
                    s.deps.unwrap_or_default(),
                    s.outs.unwrap_or_default(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages)
    }

    /// Canonical text form; `parse(to_yaml(m)) == m`.
    pub fn to_yaml(&self) -> String {
        if self.stages.is_empty() {
            return "stages: {}\n".to_string();
        }
        let mut out = String::from("stages:\n");
        for stage in self.stages.values() {
            let _ = writeln!(out, "  {}:", scalar(&stage.name));
            let _ = writeln!(out, "    cmd: {}", scalar(&stage.cmd));
            for (key, list) in [("deps", &stage.deps), ("outs", &stage.outs)] {
                if list.is_empty() {
                    continue;
                }
                let _ = writeln!(out, "    {key}:");
                for item in list {
                    let _ = writeln!(out, "    - {}", scalar(item));
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Stage> {
        self.stages.get(name)
    }

    /// Stages in file order.
    pub fn stages(&self) -> impl Iterator<Item = &Stage> {
        self.stages.values()
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.stages.get_index_of(name)
    }

    /// Names of the stages whose outputs feed `name` directly.
    pub fn upstream(&self, name: &str) -> Vec<&str> {
        let Some(stage) = self.stages.get(name) else {
            return Vec::new();
        };
        self.stages
            .values()
            .filter(|other| other.name != stage.name && feeds(other, stage))
            .map(|other| other.name.as_str())
            .collect()
    }

    /// Names of the stages that consume an output of `name` directly.
    pub fn downstream(&self, name: &str) -> Vec<&str> {
        let Some(stage) = self.stages.get(name) else {
            return Vec::new();
        };
        self.stages
            .values()
            .filter(|other| other.name != stage.name && feeds(stage, other))
            .map(|other| other.name.as_str())
            .collect()
    }

    /// Stage that declares `path` (or a directory containing it) as an output.
    pub fn producer_of(&self, path: &str) -> Option<&Stage> {
        self.stages
            .values()
            .find(|s| s.outs.iter().any(|o| path::is_under(path, o)))
    }

    /// Topological order; among ready stages the one earliest in the file wins.
    pub fn topo_order(&self) -> Result<Vec<&Stage>> {
        let n = self.stages.len();
        let mut indegree = vec![0usize; n];
        let mut edges: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, stage) in self.stages.values().enumerate() {
            for up in self.upstream(&stage.name) {
                let u = self.index_of(up).expect("upstream is a stage");
                edges[u].push(i);
                indegree[i] += 1;
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &edges[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() < n {
            let remaining: Vec<usize> = (0..n).filter(|&i| indegree[i] > 0).collect();
            return Err(ModelError::Cycle(self.find_cycle(&remaining, &edges)));
        }
        Ok(order
            .into_iter()
            .map(|i| &self.stages[i])
            .collect())
    }

    fn find_cycle(&self, remaining: &[usize], edges: &[Vec<usize>]) -> Vec<String> {
        // Every remaining node keeps an incoming edge from another remaining
        // node, so walking predecessors inside the remaining set must loop.
        let inside: BTreeSet<usize> = remaining.iter().copied().collect();
        let predecessor = |node: usize| {
            (0..edges.len())
                .find(|u| inside.contains(u) && edges[*u].contains(&node))
                .expect("remaining nodes have a remaining predecessor")
        };
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut walk = Vec::new();
        let mut node = remaining[0];
        while !seen.contains_key(&node) {
            seen.insert(node, walk.len());
            walk.push(node);
            node = predecessor(node);
        }
        let mut cycle: Vec<String> = walk[seen[&node]..]
            .iter()
            .rev()
            .map(|&i| self.stages[i].name.clone())
            .collect();
        cycle.push(cycle[0].clone());
        cycle
    }

    fn check_outputs(&self) -> Result<()> {
        let stages: Vec<&Stage> = self.stages.values().collect();
        for (i, a) in stages.iter().enumerate() {
            for b in &stages[..i] {
                for out_a in &a.outs {
                    if let Some(out_b) = b.outs.iter().find(|o| paths_overlap(out_a, o)) {
                        return Err(ModelError::DuplicateOutput {
                            path: path::key(if out_a.len() >= out_b.len() { out_a } else { out_b })
                                .to_string(),
                            first: b.name.clone(),
                            second: a.name.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// True when an output of `from` overlaps a dependency of `to`.
fn feeds(from: &Stage, to: &Stage) -> bool {
    from.outs
        .iter()
        .any(|out| to.deps.iter().any(|dep| paths_overlap(out, dep)))
}
