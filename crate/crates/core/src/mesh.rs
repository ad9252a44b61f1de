//! Conforming 2D triangulations with newest-vertex bisection.
//!
//! Triangles are stored counterclockwise with the *newest vertex first*: for
//! `[v0, v1, v2]` the refinement edge is `(v1, v2)`, the edge opposite local
//! vertex 0. Local edge `i` of a triangle is always the edge opposite local
//! vertex `i`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Elementwise control (`omega_c`) and observation (`omega_o`) regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubdomainMask {
    pub in_omega_c: Vec<bool>,
    pub in_omega_o: Vec<bool>,
}

impl SubdomainMask {
    /// Both regions cover every element.
    pub fn full(num_triangles: usize) -> Self {
        Self {
            in_omega_c: vec![true; num_triangles],
            in_omega_o: vec![true; num_triangles],
        }
    }

    pub fn len(&self) -> usize {
        self.in_omega_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_omega_c.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    /// Endpoints, sorted ascending.
    pub vertices: [usize; 2],
    /// Lower-indexed adjacent triangle.
    pub first: usize,
    /// Higher-indexed adjacent triangle; `None` on the boundary.
    pub second: Option<usize>,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.second.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    mask: SubdomainMask,
    edges: Vec<Edge>,
    triangle_edges: Vec<[usize; 3]>,
    boundary_vertex: Vec<bool>,
    diameters: Vec<f64>,
    areas: Vec<f64>,
}

/// Output of [`Mesh::refine`]: the refined mesh plus the data needed to
/// transfer piecewise linear functions onto it.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub mesh: Mesh,
    /// Coarse triangle each fine triangle descends from (identity for
    /// untouched triangles).
    pub parent: Vec<usize>,
    /// Endpoints of the coarse edge bisected by each new vertex; new vertex
    /// `k` has index `coarse.num_vertices() + k`.
    pub new_vertex_parents: Vec<[usize; 2]>,
}

impl Refinement {
    /// Nodal injection of a coarse P1 function (exact for nested meshes).
    pub fn prolongate(&self, coarse: &[f64]) -> Vec<f64> {
        let mut fine = Vec::with_capacity(coarse.len() + self.new_vertex_parents.len());
        fine.extend_from_slice(coarse);
        for &[a, b] in &self.new_vertex_parents {
            let v = 0.5 * (fine[a] + fine[b]);
            fine.push(v);
        }
        fine
    }
}

fn signed_area2(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Mesh {
    /// Builds a mesh and its derived topology. Triangles must be
    /// counterclockwise with positive area; their first vertex is taken as the
    /// newest vertex.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>, mask: SubdomainMask) -> Result<Self> {
        if mask.in_omega_c.len() != triangles.len() || mask.in_omega_o.len() != triangles.len() {
            return Err(Error::invalid("subdomain mask length differs from triangle count"));
        }
        let nv = vertices.len();
        let mut areas = Vec::with_capacity(triangles.len());
        let mut diameters = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= nv) {
                return Err(Error::invalid(format!("triangle {t} references a missing vertex")));
            }
            let [a, b, c] = tri.map(|v| vertices[v]);
            let area = 0.5 * signed_area2(a, b, c);
            if !(area > 0.0) {
                return Err(Error::invalid(format!(
                    "triangle {t} is degenerate or clockwise (area {area:e})"
                )));
            }
            areas.push(area);
            diameters.push(dist(a, b).max(dist(b, c)).max(dist(c, a)));
        }

        let mut lookup: HashMap<(usize, usize), usize> = HashMap::with_capacity(triangles.len() * 2);
        let mut edges: Vec<Edge> = Vec::with_capacity(triangles.len() * 3 / 2 + 8);
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut local = [0usize; 3];
            for i in 0..3 {
                let a = tri[(i + 1) % 3];
                let b = tri[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                let e = *lookup.entry(key).or_insert_with(|| {
                    edges.push(Edge {
                        vertices: [key.0, key.1],
                        first: t,
                        second: None,
                    });
                    edges.len() - 1
                });
                if edges[e].first != t {
                    if edges[e].second.is_some() {
                        return Err(Error::invalid(format!(
                            "edge ({}, {}) is shared by more than two triangles",
                            key.0, key.1
                        )));
                    }
                    edges[e].second = Some(t);
                }
                local[i] = e;
            }
            triangle_edges.push(local);
        }

        let mut boundary_vertex = vec![false; nv];
        for e in edges.iter().filter(|e| e.is_boundary()) {
            boundary_vertex[e.vertices[0]] = true;
            boundary_vertex[e.vertices[1]] = true;
        }

        Ok(Self {
            vertices,
            triangles,
            mask,
            edges,
            triangle_edges,
            boundary_vertex,
            diameters,
            areas,
        })
    }

    /// Rotates each triangle so that its longest edge becomes the refinement
    /// edge (ties go to the lowest local index).
    pub fn with_longest_edge_refinement(vertices: Vec<Point>, triangles: Vec<[usize; 3]>, mask: SubdomainMask) -> Result<Self> {
        let triangles = triangles
            .into_iter()
            .map(|tri| {
                let len = |i: usize| dist(vertices[tri[(i + 1) % 3]], vertices[tri[(i + 2) % 3]]);
                let mut best = 0;
                for i in 1..3 {
                    if len(i) > len(best) {
                        best = i;
                    }
                }
                [tri[best], tri[(best + 1) % 3], tri[(best + 2) % 3]]
            })
            .collect();
        Self::new(vertices, triangles, mask)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn vertex(&self, v: usize) -> Point {
        self.vertices[v]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }

    pub fn mask(&self) -> &SubdomainMask {
        &self.mask
    }

    /// Replaces the subdomain flags.
    pub fn with_mask(mut self, mask: SubdomainMask) -> Result<Self> {
        if mask.len() != self.num_triangles() || mask.in_omega_o.len() != self.num_triangles() {
            return Err(Error::invalid("subdomain mask length differs from triangle count"));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    /// Edge ids of triangle `t`; entry `i` is opposite local vertex `i`.
    pub fn triangle_edges(&self, t: usize) -> [usize; 3] {
        self.triangle_edges[t]
    }

    pub fn is_boundary_vertex(&self, v: usize) -> bool {
        self.boundary_vertex[v]
    }

    pub fn boundary_vertices(&self) -> &[bool] {
        &self.boundary_vertex
    }

    /// Element diameter `h_K` (longest edge).
    pub fn diameter(&self, t: usize) -> f64 {
        self.diameters[t]
    }

    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }

    pub fn area(&self, t: usize) -> f64 {
        self.areas[t]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn h_min(&self) -> f64 {
        self.diameters.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn h_max(&self) -> f64 {
        self.diameters.iter().copied().fold(0.0, f64::max)
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e].vertices;
        dist(self.vertices[a], self.vertices[b])
    }

    pub fn edge_midpoint(&self, e: usize) -> Point {
        let [a, b] = self.edges[e].vertices;
        let (p, q) = (self.vertices[a], self.vertices[b]);
        [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
    }

    /// Endpoints of the refinement edge of `t`.
    pub fn refinement_edge(&self, t: usize) -> [usize; 2] {
        let [_, a, b] = self.triangles[t];
        [a, b]
    }

    /// Gradients of the three nodal basis functions on `t`.
    pub fn basis_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [p0, p1, p2] = self.triangles[t].map(|v| self.vertices[v]);
        let a2 = 2.0 * self.areas[t];
        [
            [(p1[1] - p2[1]) / a2, (p2[0] - p1[0]) / a2],
            [(p2[1] - p0[1]) / a2, (p0[0] - p2[0]) / a2],
            [(p0[1] - p1[1]) / a2, (p1[0] - p0[0]) / a2],
        ]
    }

    /// Constant gradient of the P1 function with nodal `coeffs` on `t`.
    pub fn gradient(&self, t: usize, coeffs: &[f64]) -> [f64; 2] {
        let g = self.basis_gradients(t);
        let tri = self.triangles[t];
        let mut out = [0.0; 2];
        for i in 0..3 {
            out[0] += coeffs[tri[i]] * g[i][0];
            out[1] += coeffs[tri[i]] * g[i][1];
        }
        out
    }

    /// Unit outward normal of `t` on the edge `e`.
    pub fn outward_normal(&self, t: usize, e: usize) -> Point {
        let tri = self.triangles[t];
        let i = self.triangle_edges[t]
            .iter()
            .position(|&x| x == e)
            .expect("edge does not belong to triangle");
        let a = self.vertices[tri[(i + 1) % 3]];
        let b = self.vertices[tri[(i + 2) % 3]];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = dx.hypot(dy);
        [dy / len, -dx / len]
    }

    /// Smallest interior angle over all triangles, in radians.
    pub fn min_angle(&self) -> f64 {
        let mut best = PI;
        for tri in &self.triangles {
            let p = tri.map(|v| self.vertices[v]);
            for i in 0..3 {
                let a = p[i];
                let b = p[(i + 1) % 3];
                let c = p[(i + 2) % 3];
                let u = [b[0] - a[0], b[1] - a[1]];
                let w = [c[0] - a[0], c[1] - a[1]];
                let cos = (u[0] * w[0] + u[1] * w[1]) / (u[0].hypot(u[1]) * w[0].hypot(w[1]));
                best = best.min(cos.clamp(-1.0, 1.0).acos());
            }
        }
        best
    }

    /// Checks that no vertex hangs in the interior of a boundary edge. Any
    /// hanging node would expose the edges around it as spurious boundary
    /// edges, so checking boundary edges against boundary vertices suffices.
    pub fn check_conformity(&self) -> Result<()> {
        let boundary: Vec<usize> = (0..self.num_vertices()).filter(|&v| self.boundary_vertex[v]).collect();
        for (e, edge) in self.edges.iter().enumerate().filter(|(_, e)| e.is_boundary()) {
            let [a, b] = edge.vertices;
            let (p, q) = (self.vertices[a], self.vertices[b]);
            let len2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            for &v in &boundary {
                if v == a || v == b {
                    continue;
                }
                let x = self.vertices[v];
                let cross = signed_area2(p, q, x).abs();
                let t = ((x[0] - p[0]) * (q[0] - p[0]) + (x[1] - p[1]) * (q[1] - p[1])) / len2;
                if cross <= 1e-12 * len2 && t > 1e-12 && t < 1.0 - 1e-12 {
                    return Err(Error::invalid(format!("vertex {v} hangs on edge {e}")));
                }
            }
        }
        for (t, &area) in self.areas.iter().enumerate() {
            if !(area > 0.0) {
                return Err(Error::invalid(format!("triangle {t} has nonpositive area")));
            }
        }
        Ok(())
    }

    /// Newest-vertex bisection of the marked triangles with conforming
    /// closure.
    pub fn refine(&self, marked: &[usize]) -> Result<Refinement> {
        let mut edge_marks = vec![false; self.num_edges()];
        for &t in marked {
            if t >= self.num_triangles() {
                return Err(Error::invalid(format!("unknown triangle id {t}")));
            }
            edge_marks[self.triangle_edges[t][0]] = true;
        }
        Ok(self.bisect(edge_marks))
    }

    /// Bisects every edge once, splitting each triangle into four.
    pub fn refine_uniform(&self) -> Refinement {
        self.bisect(vec![true; self.num_edges()])
    }

    fn bisect(&self, mut marks: Vec<bool>) -> Refinement {
        // Closure: a triangle with any marked edge must bisect its refinement edge.
        loop {
            let mut changed = false;
            for te in &self.triangle_edges {
                if !marks[te[0]] && (marks[te[1]] || marks[te[2]]) {
                    marks[te[0]] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }

        let mut vertices = self.vertices.clone();
        let mut midpoint = vec![usize::MAX; self.num_edges()];
        let mut new_vertex_parents = Vec::new();
        for (e, _) in marks.iter().enumerate().filter(|(_, &m)| m) {
            let [a, b] = self.edges[e].vertices;
            midpoint[e] = vertices.len();
            vertices.push(self.edge_midpoint(e));
            new_vertex_parents.push([a, b]);
        }

        let mut triangles = self.triangles.clone();
        let mut parent: Vec<usize> = (0..self.num_triangles()).collect();
        let mut mask = self.mask.clone();
        let mut children = Vec::with_capacity(4);
        for t in 0..self.num_triangles() {
            let te = self.triangle_edges[t];
            if !marks[te[0]] {
                continue;
            }
            let [v0, v1, v2] = self.triangles[t];
            let m = midpoint[te[0]];
            children.clear();
            // [m, v0, v1] has refinement edge (v0, v1) = local edge 2 of t.
            if marks[te[2]] {
                let m1 = midpoint[te[2]];
                children.push([m1, m, v0]);
                children.push([m1, v1, m]);
            } else {
                children.push([m, v0, v1]);
            }
            // [m, v2, v0] has refinement edge (v2, v0) = local edge 1 of t.
            if marks[te[1]] {
                let m2 = midpoint[te[1]];
                children.push([m2, m, v2]);
                children.push([m2, v0, m]);
            } else {
                children.push([m, v2, v0]);
            }
            triangles[t] = children[0];
            for &child in &children[1..] {
                triangles.push(child);
                parent.push(t);
                mask.in_omega_c.push(self.mask.in_omega_c[t]);
                mask.in_omega_o.push(self.mask.in_omega_o[t]);
            }
        }

        let mesh = Mesh::new(vertices, triangles, mask).expect("bisection preserves validity");
        Refinement {
            mesh,
            parent,
            new_vertex_parents,
        }
    }

    /// Writes the plain-text mesh format: `nv nt`, then `x y boundary_flag`
    /// per vertex, then `i j k in_omega_c in_omega_o` per triangle.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.num_vertices(), self.num_triangles())?;
        for (v, p) in self.vertices.iter().enumerate() {
            writeln!(out, "{:.16e} {:.16e} {}", p[0], p[1], u8::from(self.boundary_vertex[v]))?;
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            writeln!(
                out,
                "{} {} {} {} {}",
                tri[0],
                tri[1],
                tri[2],
                u8::from(self.mask.in_omega_c[t]),
                u8::from(self.mask.in_omega_o[t])
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(s) if s.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let mut next = |what: &str| -> Result<(usize, Vec<String>)> {
            match lines.next() {
                Some((n, Ok(s))) => Ok((n, s.split_whitespace().map(str::to_owned).collect())),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Format {
                    line: 0,
                    message: format!("unexpected end of input, expected {what}"),
                }),
            }
        };
        fn field<T: std::str::FromStr>(line: usize, tok: &[String], i: usize) -> Result<T> {
            tok.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                line,
                message: format!("cannot parse field {}", i + 1),
            })
        }
        fn flag(line: usize, tok: &[String], i: usize) -> Result<bool> {
            match field::<u8>(line, tok, i)? {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format {
                    line,
                    message: format!("flag must be 0 or 1, got {other}"),
                }),
            }
        }

        let (n, head) = next("header")?;
        let nv: usize = field(n, &head, 0)?;
        let nt: usize = field(n, &head, 1)?;
        let mut vertices = Vec::with_capacity(nv);
        let mut flags = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (n, tok) = next("vertex line")?;
            vertices.push([field(n, &tok, 0)?, field(n, &tok, 1)?]);
            flags.push((n, flag(n, &tok, 2)?));
        }
        let mut triangles = Vec::with_capacity(nt);
        let mut mask = SubdomainMask {
            in_omega_c: Vec::with_capacity(nt),
            in_omega_o: Vec::with_capacity(nt),
        };
        for _ in 0..nt {
            let (n, tok) = next("triangle line")?;
            triangles.push([field(n, &tok, 0)?, field(n, &tok, 1)?, field(n, &tok, 2)?]);
            mask.in_omega_c.push(flag(n, &tok, 3)?);
            mask.in_omega_o.push(flag(n, &tok, 4)?);
        }
        let mesh = Mesh::new(vertices, triangles, mask)?;
        for (v, &(line, f)) in flags.iter().enumerate() {
            if f != mesh.boundary_vertex[v] {
                return Err(Error::Format {
                    line,
                    message: format!("boundary flag of vertex {v} disagrees with the topology"),
                });
            }
        }
        Ok(mesh)
    }
}

/// Inscribed regular `n_boundary`-gon fanned from the origin, refined
/// uniformly `levels` times.
pub fn make_disk_mesh(n_boundary: usize, radius: f64, levels: usize) -> Result<Mesh> {
    if n_boundary < 3 {
        return Err(Error::invalid(format!("n_boundary must be at least 3, got {n_boundary}")));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    let mut vertices = vec![[0.0, 0.0]];
    for k in 0..n_boundary {
        let theta = 2.0 * PI * k as f64 / n_boundary as f64;
        vertices.push([radius * theta.cos(), radius * theta.sin()]);
    }
    let triangles = (0..n_boundary).map(|k| [0, k + 1, (k + 1) % n_boundary + 1]).collect();
    let mut mesh = Mesh::with_longest_edge_refinement(vertices, triangles, SubdomainMask::full(n_boundary))?;
    for _ in 0..levels {
        mesh = mesh.refine_uniform().mesh;
    }
    Ok(mesh)
}

/// Jump `[[grad f . nu]]` across an interior edge, with `nu` the outward
/// normal of the lower-indexed adjacent triangle. Boundary edges return 0:
/// the estimators only sum jumps over interior edges.
pub fn edge_jump_normal_gradient(mesh: &Mesh, coeffs: &[f64], e: usize) -> f64 {
    let edge = mesh.edge(e);
    match edge.second {
        None => 0.0,
        Some(second) => oriented_jump(mesh, coeffs, e, edge.first, second),
    }
}

/// `(grad f|_from - grad f|_to) . nu` with `nu` fixed to the outward normal
/// of the lower-indexed triangle on `e`. Swapping `from` and `to` flips the
/// sign.
pub fn oriented_jump(mesh: &Mesh, coeffs: &[f64], e: usize, from: usize, to: usize) -> f64 {
    let nu = mesh.outward_normal(mesh.edge(e).first, e);
    let ga = mesh.gradient(from, coeffs);
    let gb = mesh.gradient(to, coeffs);
    (ga[0] - gb[0]) * nu[0] + (ga[1] - gb[1]) * nu[1]
}
