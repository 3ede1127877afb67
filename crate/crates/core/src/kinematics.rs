//! Tree-structured multibody forward kinematics, geometric Jacobians, center
//! of mass and the Centroidal Momentum Matrix.
//!
//! A chain is a set of links connected by single-DoF revolute joints with no
//! closed loops. Each joint carries two fixed offsets around a pair of
//! auxiliary frames that coincide at zero joint angle; the joint rotation
//! between them follows the Rodrigues formula.

use crate::geometry::{adjoint, skew, unskew, RigidTransform, Rotation, SpatialVelocity, Trivialization};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("link `{0}` has non-positive mass {1}")]
    NonPositiveMass(String, f64),
    #[error("link `{0}` inertia is not symmetric positive semidefinite")]
    BadInertia(String),
    #[error("joint `{0}->{1}` axis is not unit norm")]
    BadAxis(String, String),
    #[error("chain is not a connected tree: {0}")]
    NotATree(String),
    #[error("configuration has {got} joint values, chain has {expected} joints")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("chain JSON: {0}")]
    Parse(String),
}

/// One rigid body: mass, body-frame CoM offset and 6x6 spatial inertia
/// expressed in the link frame with the (linear; angular) ordering.
#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub mass: f64,
    pub com: Vector3<f64>,
    pub inertia: Matrix6<f64>,
}

/// Revolute joint between two links, with fixed offsets on both sides of the
/// rotating pair of frames.
#[derive(Debug, Clone)]
pub struct Joint {
    pub parent: usize,
    pub child: usize,
    pub axis: Vector3<f64>,
    pub parent_offset: RigidTransform,
    pub child_offset: RigidTransform,
}

/// Spatial inertia of a body with mass `m`, CoM offset `c` (link frame) and
/// rotational inertia `i_com` about its CoM: `[[m I, -m c^], [m c^, I_o]]`
/// with `I_o = i_com - m c^ c^`.
pub fn spatial_inertia(mass: f64, com: &Vector3<f64>, i_com: &Matrix3<f64>) -> Matrix6<f64> {
    let cx = skew(com);
    let mut i = Matrix6::zeros();
    i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(mass * Matrix3::identity()));
    i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-mass * cx));
    i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(mass * cx));
    i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(i_com - mass * cx * cx));
    i
}

/// Per-link traversal data resolved against the chosen base.
#[derive(Debug, Clone)]
struct TreeNode {
    /// Incoming joint index, None for the base.
    joint: Option<usize>,
    /// True when the stored joint's parent/child opposes the tree direction.
    flipped: bool,
    /// Tree parent link index, usize::MAX for the base.
    parent_link: usize,
    /// Joints on the path base -> link, in order.
    path: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KinematicChain {
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub base: usize,
    nodes: Vec<TreeNode>,
    total_mass: f64,
}

/// Base pose plus joint positions.
#[derive(Debug, Clone)]
pub struct RobotConfiguration {
    pub base_pose: RigidTransform,
    pub joint_positions: DVector<f64>,
}

impl RobotConfiguration {
    pub fn new(base_pose: RigidTransform, joint_positions: DVector<f64>) -> Self {
        RobotConfiguration { base_pose, joint_positions }
    }

    pub fn zero(chain: &KinematicChain) -> Self {
        RobotConfiguration {
            base_pose: RigidTransform::identity(),
            joint_positions: DVector::zeros(chain.joints.len()),
        }
    }
}

/// Left-trivialized base velocity stacked with joint rates, dimension 6+n.
#[derive(Debug, Clone)]
pub struct SystemVelocity {
    pub base: SpatialVelocity,
    pub joint_rates: DVector<f64>,
}

impl SystemVelocity {
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.joint_rates.len();
        let mut v = DVector::zeros(6 + n);
        v.rows_mut(0, 6).copy_from(&self.base.to_vector());
        v.rows_mut(6, n).copy_from(&self.joint_rates);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        let base6 = Vector6::from_iterator(v.rows(0, 6).iter().copied());
        SystemVelocity {
            base: SpatialVelocity::from_vector(&base6, Trivialization::Left),
            joint_rates: DVector::from_iterator(v.len() - 6, v.rows(6, v.len() - 6).iter().copied()),
        }
    }
}

// -------- JSON schema --------

#[derive(Serialize, Deserialize)]
struct OffsetJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    p: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct LinkJson {
    name: String,
    mass: f64,
    com: [f64; 3],
    inertia: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JointJson {
    parent: String,
    child: String,
    axis: [f64; 3],
    parent_offset: OffsetJson,
    child_offset: OffsetJson,
}

#[derive(Serialize, Deserialize)]
struct ChainJson {
    links: Vec<LinkJson>,
    joints: Vec<JointJson>,
    base: String,
}

fn offset_to_transform(o: &OffsetJson) -> Result<RigidTransform, ChainError> {
    let r = Matrix3::from_row_slice(&o.r);
    let rotation = Rotation::from_matrix(r)
        .map_err(|e| ChainError::Parse(format!("offset rotation invalid: {e}")))?;
    Ok(RigidTransform::new(rotation, Vector3::from(o.p)))
}

fn transform_to_offset(h: &RigidTransform) -> OffsetJson {
    let m = h.rotation.matrix();
    let mut r = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            r[3 * i + j] = m[(i, j)];
        }
    }
    OffsetJson { r, p: [h.translation.x, h.translation.y, h.translation.z] }
}

impl KinematicChain {
    pub fn new(links: Vec<Link>, joints: Vec<Joint>, base: usize) -> Result<Self, ChainError> {
        let mut chain = KinematicChain { links, joints, base, nodes: Vec::new(), total_mass: 0.0 };
        chain.validate_and_index()?;
        Ok(chain)
    }

    pub fn from_json(text: &str) -> Result<Self, ChainError> {
        let parsed: ChainJson =
            serde_json::from_str(text).map_err(|e| ChainError::Parse(e.to_string()))?;
        let links: Vec<Link> = parsed
            .links
            .iter()
            .map(|l| {
                if l.inertia.len() != 36 {
                    return Err(ChainError::Parse(format!(
                        "link `{}` inertia must have 36 entries, got {}",
                        l.name,
                        l.inertia.len()
                    )));
                }
                Ok(Link {
                    name: l.name.clone(),
                    mass: l.mass,
                    com: Vector3::from(l.com),
                    inertia: Matrix6::from_row_slice(&l.inertia),
                })
            })
            .collect::<Result<_, _>>()?;
        let index_of = |name: &str| -> Result<usize, ChainError> {
            links
                .iter()
                .position(|l| l.name == name)
                .ok_or_else(|| ChainError::UnknownLink(name.to_string()))
        };
        let joints: Vec<Joint> = parsed
            .joints
            .iter()
            .map(|j| {
                Ok(Joint {
                    parent: index_of(&j.parent)?,
                    child: index_of(&j.child)?,
                    axis: Vector3::from(j.axis),
                    parent_offset: offset_to_transform(&j.parent_offset)?,
                    child_offset: offset_to_transform(&j.child_offset)?,
                })
            })
            .collect::<Result<_, _>>()?;
        let base = index_of(&parsed.base)?;
        Self::new(links, joints, base)
    }

    pub fn to_json(&self) -> String {
        let links = self
            .links
            .iter()
            .map(|l| LinkJson {
                name: l.name.clone(),
                mass: l.mass,
                com: [l.com.x, l.com.y, l.com.z],
                inertia: (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| l.inertia[(i, j)]).collect(),
            })
            .collect();
        let joints = self
            .joints
            .iter()
            .map(|j| JointJson {
                parent: self.links[j.parent].name.clone(),
                child: self.links[j.child].name.clone(),
                axis: [j.axis.x, j.axis.y, j.axis.z],
                parent_offset: transform_to_offset(&j.parent_offset),
                child_offset: transform_to_offset(&j.child_offset),
            })
            .collect();
        serde_json::to_string_pretty(&ChainJson { links, joints, base: self.links[self.base].name.clone() })
            .expect("chain serialization cannot fail")
    }

    fn validate_and_index(&mut self) -> Result<(), ChainError> {
        for l in &self.links {
            if l.mass <= 0.0 {
                return Err(ChainError::NonPositiveMass(l.name.clone(), l.mass));
            }
            if (l.inertia - l.inertia.transpose()).norm() > 1e-9 {
                return Err(ChainError::BadInertia(l.name.clone()));
            }
            let eigs = l.inertia.symmetric_eigenvalues();
            if eigs.iter().any(|&e| e < -1e-9) {
                return Err(ChainError::BadInertia(l.name.clone()));
            }
        }
        for j in &self.joints {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(ChainError::BadAxis(
                    self.links[j.parent].name.clone(),
                    self.links[j.child].name.clone(),
                ));
            }
        }
        if self.joints.len() + 1 != self.links.len() {
            return Err(ChainError::NotATree(format!(
                "{} links require {} joints, got {}",
                self.links.len(),
                self.links.len() - 1,
                self.joints.len()
            )));
        }

        // Orient the tree from the base by BFS over undirected joint edges.
        let n = self.links.len();
        let mut adjacency: Vec<Vec<(usize, usize, bool)>> = vec![Vec::new(); n];
        for (ji, j) in self.joints.iter().enumerate() {
            adjacency[j.parent].push((j.child, ji, false));
            adjacency[j.child].push((j.parent, ji, true));
        }
        let mut nodes: Vec<Option<TreeNode>> = vec![None; n];
        nodes[self.base] =
            Some(TreeNode { joint: None, flipped: false, parent_link: usize::MAX, path: Vec::new() });
        let mut queue = std::collections::VecDeque::from([self.base]);
        while let Some(link) = queue.pop_front() {
            let base_path = nodes[link].as_ref().unwrap().path.clone();
            for &(next, ji, flipped) in &adjacency[link] {
                if nodes[next].is_none() {
                    let mut path = base_path.clone();
                    path.push(ji);
                    nodes[next] = Some(TreeNode { joint: Some(ji), flipped, parent_link: link, path });
                    queue.push_back(next);
                }
            }
        }
        if let Some(missing) = nodes.iter().position(|n| n.is_none()) {
            return Err(ChainError::NotATree(format!(
                "link `{}` is not reachable from the base",
                self.links[missing].name
            )));
        }
        self.nodes = nodes.into_iter().map(Option::unwrap).collect();
        self.total_mass = self.links.iter().map(|l| l.mass).sum();
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn link_index(&self, name: &str) -> Result<usize, ChainError> {
        self.links
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| ChainError::UnknownLink(name.to_string()))
    }

    fn check_config(&self, config: &RobotConfiguration) -> Result<(), ChainError> {
        if config.joint_positions.len() != self.joints.len() {
            return Err(ChainError::DimensionMismatch {
                got: config.joint_positions.len(),
                expected: self.joints.len(),
            });
        }
        Ok(())
    }

    /// Transform from the tree parent of `link` to `link`, at joint angle `s`.
    fn incoming_transform(&self, link: usize, s: f64) -> RigidTransform {
        let node = &self.nodes[link];
        let j = &self.joints[node.joint.expect("base link has no incoming joint")];
        if node.flipped {
            let rot = Rotation::from_axis_angle(&j.axis, -s).expect("axis validated on load");
            j.child_offset
                .inverse()
                .compose(&RigidTransform::new(rot, Vector3::zeros()))
                .compose(&j.parent_offset.inverse())
        } else {
            let rot = Rotation::from_axis_angle(&j.axis, s).expect("axis validated on load");
            j.parent_offset
                .compose(&RigidTransform::new(rot, Vector3::zeros()))
                .compose(&j.child_offset)
        }
    }

    /// Joint motion subspace of the incoming joint of `link`, expressed in the
    /// link frame: the left-trivialized velocity `(0; a)` of the rotating pair
    /// carried through the child-side fixed offset.
    fn incoming_subspace(&self, link: usize) -> Vector6<f64> {
        let node = &self.nodes[link];
        let j = &self.joints[node.joint.expect("base link has no incoming joint")];
        let (offset, axis) = if node.flipped {
            (j.parent_offset.inverse(), -j.axis)
        } else {
            (j.child_offset.inverse(), j.axis)
        };
        let mut twist = Vector6::zeros();
        twist.fixed_rows_mut::<3>(3).copy_from(&axis);
        adjoint(&offset, false) * twist
    }

    /// Pose of `link` relative to the base (base pose factored out).
    fn base_relative_pose(&self, config: &RobotConfiguration, link: usize) -> RigidTransform {
        let mut h = RigidTransform::identity();
        for &ji in &self.nodes[link].path {
            let child = self.joint_tree_child(ji);
            h = h.compose(&self.incoming_transform(child, config.joint_positions[ji]));
        }
        h
    }

    /// Tree-direction child link of joint `ji`.
    fn joint_tree_child(&self, ji: usize) -> usize {
        let j = &self.joints[ji];
        if self.nodes[j.child].joint == Some(ji) && !self.nodes[j.child].flipped {
            j.child
        } else {
            j.parent
        }
    }

    /// World pose of `link`: base pose composed with the joint-transform
    /// product along the unique base -> link path.
    pub fn forward_kinematics(
        &self,
        config: &RobotConfiguration,
        link: &str,
    ) -> Result<RigidTransform, ChainError> {
        self.check_config(config)?;
        let li = self.link_index(link)?;
        Ok(config.base_pose.compose(&self.base_relative_pose(config, li)))
    }

    /// World poses of all links, ordered by link index.
    pub fn all_link_poses(&self, config: &RobotConfiguration) -> Result<Vec<RigidTransform>, ChainError> {
        self.check_config(config)?;
        Ok((0..self.links.len())
            .map(|li| config.base_pose.compose(&self.base_relative_pose(config, li)))
            .collect())
    }

    /// Left-trivialized Jacobian of `link`: first six columns are the adjoint
    /// of the link-to-base pose, the column of an on-path joint is the joint
    /// subspace carried to the link frame, off-path columns are zero. The link
    /// left-trivialized velocity is `J nu`.
    pub fn left_trivialized_jacobian(
        &self,
        config: &RobotConfiguration,
        link: &str,
    ) -> Result<DMatrix<f64>, ChainError> {
        self.check_config(config)?;
        let li = self.link_index(link)?;
        let n = self.joints.len();
        let mut jac = DMatrix::zeros(6, 6 + n);

        let h_base_link = self.base_relative_pose(config, li);
        let x_link_base = adjoint(&h_base_link.inverse(), false);
        jac.view_mut((0, 0), (6, 6)).copy_from(&x_link_base);

        // Walk the path accumulating the pose of each joint's child frame.
        let mut h_base_child = RigidTransform::identity();
        for &ji in &self.nodes[li].path {
            let child = self.joint_tree_child(ji);
            h_base_child = h_base_child.compose(&self.incoming_transform(child, config.joint_positions[ji]));
            let h_link_child = h_base_link.inverse().compose(&h_base_child);
            let col = adjoint(&h_link_child, false) * self.incoming_subspace(child);
            jac.view_mut((0, 6 + ji), (6, 1)).copy_from(&col);
        }
        Ok(jac)
    }

    /// World CoM as the mass-weighted average of all link CoM positions.
    pub fn com_position(&self, config: &RobotConfiguration) -> Result<Vector3<f64>, ChainError> {
        self.check_config(config)?;
        let mut acc = Vector3::zeros();
        for (li, link) in self.links.iter().enumerate() {
            let pose = config.base_pose.compose(&self.base_relative_pose(config, li));
            acc += link.mass * pose.apply_point(&link.com);
        }
        Ok(acc / self.total_mass)
    }

    /// Centroidal Momentum Matrix at the frame with origin on the CoM and
    /// axes parallel to the inertial frame. Satisfies `h = J_cmm nu` with the
    /// (linear; angular) momentum ordering.
    pub fn centroidal_momentum_matrix(
        &self,
        config: &RobotConfiguration,
    ) -> Result<DMatrix<f64>, ChainError> {
        self.check_config(config)?;
        let n = self.joints.len();
        let com = self.com_position(config)?;

        // Wrench transform from base to the CoM-anchored frame.
        let h_gbar_base = RigidTransform::new(
            config.base_pose.rotation,
            config.base_pose.translation - com,
        );
        let x_gbar_base = adjoint(&h_gbar_base, true);

        let mut sum = DMatrix::zeros(6, 6 + n);
        for (li, link) in self.links.iter().enumerate() {
            let h_base_link = self.base_relative_pose(config, li);
            let x_base_link = adjoint(&h_base_link, true);
            let jac = self.left_trivialized_jacobian(config, &link.name)?;
            sum += x_base_link * link.inertia * jac;
        }
        let mut out = DMatrix::zeros(6, 6 + n);
        out.copy_from(&(x_gbar_base * sum));
        Ok(out)
    }

    /// Centroidal momentum `J_cmm nu`.
    pub fn centroidal_momentum(
        &self,
        config: &RobotConfiguration,
        velocity: &SystemVelocity,
    ) -> Result<Vector6<f64>, ChainError> {
        let j = self.centroidal_momentum_matrix(config)?;
        let h = j * velocity.to_vector();
        Ok(Vector6::from_iterator(h.iter().copied()))
    }

    /// Equivalent chain rooted at `new_base`. Joint indices and angles are
    /// preserved; joints on the path to the old base are flipped in place
    /// (swapped ends, negated axis, inverted offsets).
    pub fn rebased(&self, new_base: &str) -> Result<KinematicChain, ChainError> {
        let nb = self.link_index(new_base)?;
        let mut joints = self.joints.clone();
        // Flip every joint on the path from the old base to the new one.
        for &ji in &self.nodes[nb].path {
            let j = &mut joints[ji];
            std::mem::swap(&mut j.parent, &mut j.child);
            j.axis = -j.axis;
            let new_parent_offset = j.child_offset.inverse();
            let new_child_offset = j.parent_offset.inverse();
            j.parent_offset = new_parent_offset;
            j.child_offset = new_child_offset;
        }
        KinematicChain::new(self.links.clone(), joints, nb)
    }
}

/// Left-trivialized link velocity via central finite differences of the
/// forward kinematics; the oracle counterpart of
/// [`KinematicChain::left_trivialized_jacobian`].
pub fn finite_difference_link_velocity(
    chain: &KinematicChain,
    config: &RobotConfiguration,
    velocity: &SystemVelocity,
    link: &str,
    step: f64,
) -> Result<Vector6<f64>, ChainError> {
    let plus = chain.forward_kinematics(&advance_configuration(config, velocity, step), link)?;
    let minus = chain.forward_kinematics(&advance_configuration(config, velocity, -step), link)?;
    let here = chain.forward_kinematics(config, link)?;
    let h_dot = (plus.to_homogeneous() - minus.to_homogeneous()) / (2.0 * step);
    let m = here.to_homogeneous().try_inverse().expect("pose is invertible") * h_dot;
    let lin = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let rot: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let skew_part = 0.5 * (rot - rot.transpose());
    let ang = unskew(&skew_part).expect("antisymmetrized");
    let mut v = Vector6::zeros();
    v.fixed_rows_mut::<3>(0).copy_from(&lin);
    v.fixed_rows_mut::<3>(3).copy_from(&ang);
    Ok(v)
}

/// Flows the configuration along a system velocity for a short time `dt`:
/// the base moves by the exponential of the left-trivialized twist, joints
/// advance linearly.
pub fn advance_configuration(
    config: &RobotConfiguration,
    velocity: &SystemVelocity,
    dt: f64,
) -> RobotConfiguration {
    let twist = velocity.base.to_vector() * dt;
    RobotConfiguration {
        base_pose: config.base_pose.compose(&se3_exp(&twist)),
        joint_positions: &config.joint_positions + dt * &velocity.joint_rates,
    }
}

/// Exponential of a twist `(v; w)` onto SE(3).
pub fn se3_exp(twist: &Vector6<f64>) -> RigidTransform {
    let v: Vector3<f64> = twist.fixed_rows::<3>(0).into();
    let w: Vector3<f64> = twist.fixed_rows::<3>(3).into();
    let theta = w.norm();
    let wx = skew(&w);
    let (rot, lin_map) = if theta < 1e-10 {
        (Matrix3::identity() + wx, Matrix3::identity() + 0.5 * wx)
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        let c = (theta - theta.sin()) / (theta * theta * theta);
        (
            Matrix3::identity() + a * wx + b * (wx * wx),
            Matrix3::identity() + b * wx + c * (wx * wx),
        )
    };
    let rotation = Rotation::from_matrix(rot).unwrap_or_else(|_| {
        // Re-orthonormalize in the unlikely event of drift.
        let svd = rot.svd(true, true);
        Rotation::from_matrix(svd.u.unwrap() * svd.v_t.unwrap()).expect("projected onto SO(3)")
    });
    RigidTransform::new(rotation, lin_map * v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Planar chain of `n` unit links along x, all joints about z.
    pub(crate) fn planar_chain(n: usize) -> KinematicChain {
        let mut links = vec![Link {
            name: "base".into(),
            mass: 1.0,
            com: Vector3::zeros(),
            inertia: spatial_inertia(1.0, &Vector3::zeros(), &Matrix3::identity()),
        }];
        let mut joints = Vec::new();
        for i in 0..n {
            links.push(Link {
                name: format!("link{}", i + 1),
                mass: 1.0,
                com: Vector3::new(0.5, 0.0, 0.0),
                inertia: spatial_inertia(1.0, &Vector3::new(0.5, 0.0, 0.0), &(0.1 * Matrix3::identity())),
            });
            joints.push(Joint {
                parent: i,
                child: i + 1,
                axis: Vector3::z(),
                parent_offset: RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0)),
                child_offset: RigidTransform::identity(),
            });
        }
        // First joint sits at the base origin.
        joints[0].parent_offset = RigidTransform::identity();
        KinematicChain::new(links, joints, 0).unwrap()
    }

    pub(crate) fn random_chain(rng: &mut ChaCha8Rng, n_joints: usize) -> KinematicChain {
        let mut links = Vec::new();
        let mut joints = Vec::new();
        for i in 0..=n_joints {
            let mass = rng.gen_range(0.5..3.0);
            let com = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
            let d = Vector3::new(rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
            let i_com = Matrix3::from_diagonal(&d);
            links.push(Link {
                name: format!("l{i}"),
                mass,
                com,
                inertia: spatial_inertia(mass, &com, &i_com),
            });
            if i > 0 {
                let parent = rng.gen_range(0..i);
                let axis = loop {
                    let a = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    if a.norm() > 0.2 {
                        break a.normalize();
                    }
                };
                let rand_tf = |rng: &mut ChaCha8Rng| {
                    let ax = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    let ax = if ax.norm() < 0.1 { Vector3::x() } else { ax.normalize() };
                    RigidTransform::new(
                        Rotation::from_axis_angle(&ax, rng.gen_range(-1.5..1.5)).unwrap(),
                        Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
                    )
                };
                joints.push(Joint {
                    parent,
                    child: i,
                    axis,
                    parent_offset: rand_tf(rng),
                    child_offset: rand_tf(rng),
                });
            }
        }
        KinematicChain::new(links, joints, 0).unwrap()
    }

    pub(crate) fn random_config(rng: &mut ChaCha8Rng, chain: &KinematicChain) -> RobotConfiguration {
        let ax = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let ax = if ax.norm() < 0.1 { Vector3::y() } else { ax.normalize() };
        RobotConfiguration {
            base_pose: RigidTransform::new(
                Rotation::from_axis_angle(&ax, rng.gen_range(-2.0..2.0)).unwrap(),
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            ),
            joint_positions: DVector::from_fn(chain.dof(), |_, _| rng.gen_range(-1.5..1.5)),
        }
    }

    pub(crate) fn random_velocity(rng: &mut ChaCha8Rng, chain: &KinematicChain) -> SystemVelocity {
        SystemVelocity {
            base: SpatialVelocity::new(
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                Trivialization::Left,
            ),
            joint_rates: DVector::from_fn(chain.dof(), |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn zero_configuration_composes_fixed_offsets() {
        let chain = planar_chain(2);
        let cfg = RobotConfiguration::zero(&chain);
        let end = chain.forward_kinematics(&cfg, "link2").unwrap();
        assert_relative_eq!(end.translation, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-14);
    }

    #[test]
    fn planar_two_link_trigonometry() {
        // Tip frame: add a probe link so the chain tip is at the end of link2.
        let chain = planar_chain(2);
        let mut cfg = RobotConfiguration::zero(&chain);

        // s = (0, 0): link2 frame at (1, 0); its far end (offset (1,0,0)) at (2,0).
        let end = chain.forward_kinematics(&cfg, "link2").unwrap();
        let tip = end.apply_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(tip, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-14);

        // s = (pi/2, 0): tip at (0, 2), orientation 90 degrees about z.
        cfg.joint_positions[0] = std::f64::consts::FRAC_PI_2;
        let end = chain.forward_kinematics(&cfg, "link2").unwrap();
        let tip = end.apply_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(tip, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(end.rotation.apply(&Vector3::x()), Vector3::y(), epsilon = 1e-12);

        // Generic angles against the planar trigonometry oracle.
        let (s1, s2) = (0.4, -0.9);
        cfg.joint_positions[0] = s1;
        cfg.joint_positions[1] = s2;
        let end = chain.forward_kinematics(&cfg, "link2").unwrap();
        let tip = end.apply_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(tip.x, s1.cos() + (s1 + s2).cos(), epsilon = 1e-12);
        assert_relative_eq!(tip.y, s1.sin() + (s1 + s2).sin(), epsilon = 1e-12);
    }

    #[test]
    fn unknown_link_is_an_error() {
        let chain = planar_chain(1);
        let cfg = RobotConfiguration::zero(&chain);
        assert!(chain.forward_kinematics(&cfg, "nope").is_err());
    }

    #[test]
    fn jacobian_of_base_link_is_identity_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chain = random_chain(&mut rng, 4);
        let cfg = random_config(&mut rng, &chain);
        let jac = chain.left_trivialized_jacobian(&cfg, "l0").unwrap();
        assert!((jac.view((0, 0), (6, 6)).into_owned() - DMatrix::<f64>::identity(6, 6)).norm() < 1e-12);
        assert_relative_eq!(jac.view((0, 6), (6, chain.dof())).norm(), 0.0);
    }

    #[test]
    fn off_path_joint_column_is_zero_and_fk_unchanged() {
        // Star: base with two branches.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let links: Vec<Link> = (0..3)
            .map(|i| Link {
                name: format!("l{i}"),
                mass: 1.0,
                com: Vector3::zeros(),
                inertia: spatial_inertia(1.0, &Vector3::zeros(), &Matrix3::identity()),
            })
            .collect();
        let joints = vec![
            Joint {
                parent: 0,
                child: 1,
                axis: Vector3::z(),
                parent_offset: RigidTransform::from_translation(Vector3::x()),
                child_offset: RigidTransform::identity(),
            },
            Joint {
                parent: 0,
                child: 2,
                axis: Vector3::y(),
                parent_offset: RigidTransform::from_translation(-Vector3::x()),
                child_offset: RigidTransform::identity(),
            },
        ];
        let chain = KinematicChain::new(links, joints, 0).unwrap();
        let mut cfg = RobotConfiguration::zero(&chain);
        cfg.joint_positions[0] = rng.gen_range(-1.0..1.0);
        cfg.joint_positions[1] = rng.gen_range(-1.0..1.0);

        let jac = chain.left_trivialized_jacobian(&cfg, "l1").unwrap();
        assert_relative_eq!(jac.view((0, 7), (6, 1)).norm(), 0.0);

        let before = chain.forward_kinematics(&cfg, "l1").unwrap();
        let mut perturbed = cfg.clone();
        perturbed.joint_positions[1] += 0.37;
        let after = chain.forward_kinematics(&perturbed, "l1").unwrap();
        assert_eq!(before.to_homogeneous(), after.to_homogeneous());
    }

    #[test]
    fn jacobian_matches_finite_difference_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let chain = random_chain(&mut rng, 5);
            let cfg = random_config(&mut rng, &chain);
            let vel = random_velocity(&mut rng, &chain);
            let link = format!("l{}", rng.gen_range(0..=5));
            let jac = chain.left_trivialized_jacobian(&cfg, &link).unwrap();
            let analytic = &jac * vel.to_vector();
            let fd = finite_difference_link_velocity(&chain, &cfg, &vel, &link, 1e-6).unwrap();
            let scale = fd.norm().max(1.0);
            assert!((Vector6::from_iterator(analytic.iter().copied()) - fd).norm() / scale < 1e-6,
                    "jacobian/fd mismatch on {link}");
        }
    }

    #[test]
    fn com_trivial_cases() {
        let links = vec![Link {
            name: "only".into(),
            mass: 2.0,
            com: Vector3::zeros(),
            inertia: spatial_inertia(2.0, &Vector3::zeros(), &Matrix3::identity()),
        }];
        let chain = KinematicChain::new(links, vec![], 0).unwrap();
        let cfg = RobotConfiguration::zero(&chain);
        assert_relative_eq!(chain.com_position(&cfg).unwrap(), Vector3::zeros());

        // Two equal point masses at (0,0,0) and (2,0,0) -> midpoint.
        let chain = planar_chain(1);
        let mut links = chain.links.clone();
        links[0].com = Vector3::zeros();
        links[1].com = Vector3::new(2.0, 0.0, 0.0); // joint at the base origin, so world (2,0,0)
        let chain = KinematicChain::new(links, chain.joints.clone(), 0).unwrap();
        let cfg = RobotConfiguration::zero(&chain);
        assert_relative_eq!(chain.com_position(&cfg).unwrap(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-14);
    }

    #[test]
    fn com_matches_per_link_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chain = random_chain(&mut rng, 6);
        let cfg = random_config(&mut rng, &chain);
        let mut acc = Vector3::zeros();
        let mut mass = 0.0;
        for link in &chain.links {
            let pose = chain.forward_kinematics(&cfg, &link.name).unwrap();
            acc += link.mass * pose.apply_point(&link.com);
            mass += link.mass;
        }
        assert_relative_eq!(chain.com_position(&cfg).unwrap(), acc / mass, epsilon = 1e-12);
    }

    #[test]
    fn cmm_single_body_newton() {
        let links = vec![Link {
            name: "body".into(),
            mass: 3.0,
            com: Vector3::new(0.1, -0.2, 0.3),
            inertia: spatial_inertia(3.0, &Vector3::new(0.1, -0.2, 0.3), &Matrix3::from_diagonal(&Vector3::new(0.2, 0.3, 0.4))),
        }];
        let chain = KinematicChain::new(links, vec![], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = random_config(&mut rng, &chain);

        // Pure linear base velocity v: linear momentum m R v, angular zero
        // about its own CoM.
        let v = Vector3::new(0.7, -0.4, 0.2);
        let vel = SystemVelocity {
            base: SpatialVelocity::new(v, Vector3::zeros(), Trivialization::Left),
            joint_rates: DVector::zeros(0),
        };
        let h = chain.centroidal_momentum(&cfg, &vel).unwrap();
        let expected_linear = 3.0 * cfg.base_pose.rotation.apply(&v);
        assert_relative_eq!(Vector3::new(h[0], h[1], h[2]), expected_linear, epsilon = 1e-12);
        assert_relative_eq!(Vector3::new(h[3], h[4], h[5]), Vector3::zeros(), epsilon = 1e-12);

        // Zero velocity -> zero momentum.
        let zero = SystemVelocity {
            base: SpatialVelocity::zero(Trivialization::Left),
            joint_rates: DVector::zeros(0),
        };
        assert_relative_eq!(chain.centroidal_momentum(&cfg, &zero).unwrap().norm(), 0.0);
    }

    #[test]
    fn cmm_matches_per_link_momentum_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let chain = random_chain(&mut rng, 3);
            let cfg = random_config(&mut rng, &chain);
            let vel = random_velocity(&mut rng, &chain);
            let com = chain.com_position(&cfg).unwrap();

            // Oracle: per-link wrench-adjoint to the CoM frame times the link
            // momentum, with each link treated independently.
            let mut oracle = Vector6::zeros();
            for link in &chain.links {
                let pose = chain.forward_kinematics(&cfg, &link.name).unwrap();
                let jac = chain.left_trivialized_jacobian(&cfg, &link.name).unwrap();
                let v_link = &jac * vel.to_vector();
                let h_link = link.inertia * Vector6::from_iterator(v_link.iter().copied());
                let h_gbar_link = RigidTransform::new(pose.rotation, pose.translation - com);
                oracle += adjoint(&h_gbar_link, true) * h_link;
            }
            let h = chain.centroidal_momentum(&cfg, &vel).unwrap();
            assert!((h - oracle).norm() < 1e-10, "CMM mismatch: {}", (h - oracle).norm());
        }
    }

    #[test]
    fn com_velocity_matches_cmm_linear_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let chain = random_chain(&mut rng, 5);
        let cfg = random_config(&mut rng, &chain);
        let vel = random_velocity(&mut rng, &chain);
        let h = chain.centroidal_momentum(&cfg, &vel).unwrap();
        let com_rate_cmm = Vector3::new(h[0], h[1], h[2]) / chain.total_mass();

        let step = 1e-6;
        let plus = chain.com_position(&advance_configuration(&cfg, &vel, step)).unwrap();
        let minus = chain.com_position(&advance_configuration(&cfg, &vel, -step)).unwrap();
        let fd = (plus - minus) / (2.0 * step);
        assert!((fd - com_rate_cmm).norm() / fd.norm().max(1.0) < 1e-6);
    }

    #[test]
    fn rerooting_preserves_world_kinematics() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let chain = random_chain(&mut rng, 5);
        let cfg = random_config(&mut rng, &chain);

        let new_base = "l3";
        let rebase = chain.rebased(new_base).unwrap();
        let new_base_pose = chain.forward_kinematics(&cfg, new_base).unwrap();
        let new_cfg = RobotConfiguration::new(new_base_pose, cfg.joint_positions.clone());

        for link in &chain.links {
            let a = chain.forward_kinematics(&cfg, &link.name).unwrap().to_homogeneous();
            let b = rebase.forward_kinematics(&new_cfg, &link.name).unwrap().to_homogeneous();
            assert!((a - b).norm() < 1e-10, "re-rooted FK differs for {}", link.name);
        }
        assert_relative_eq!(
            chain.com_position(&cfg).unwrap(),
            rebase.com_position(&new_cfg).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn chain_json_round_trip() {
        let chain = planar_chain(2);
        let text = chain.to_json();
        let back = KinematicChain::from_json(&text).unwrap();
        let cfg = RobotConfiguration {
            base_pose: RigidTransform::from_translation(Vector3::new(0.1, 0.2, 0.3)),
            joint_positions: DVector::from_vec(vec![0.4, -0.7]),
        };
        assert_relative_eq!(
            chain.forward_kinematics(&cfg, "link2").unwrap().to_homogeneous(),
            back.forward_kinematics(&cfg, "link2").unwrap().to_homogeneous(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn rejects_cycles_and_bad_masses() {
        let mk_link = |name: &str| Link {
            name: name.into(),
            mass: 1.0,
            com: Vector3::zeros(),
            inertia: spatial_inertia(1.0, &Vector3::zeros(), &Matrix3::identity()),
        };
        // Two links, two joints -> loop.
        let links = vec![mk_link("a"), mk_link("b")];
        let j = Joint {
            parent: 0,
            child: 1,
            axis: Vector3::z(),
            parent_offset: RigidTransform::identity(),
            child_offset: RigidTransform::identity(),
        };
        assert!(KinematicChain::new(links.clone(), vec![j.clone(), j.clone()], 0).is_err());

        let mut bad = mk_link("a");
        bad.mass = 0.0;
        assert!(KinematicChain::new(vec![bad], vec![], 0).is_err());
    }
}
