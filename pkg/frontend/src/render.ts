/** Three.js point cloud view. The camera and orbit state persist across cloud
 * updates; only the geometry buffers are replaced. */

import * as THREE from 'three';
import { OrbitControls } from 'three/addons/controls/OrbitControls.js';
import { WireCloud } from './api.js';

export class CloudView {
  private readonly scene: THREE.Scene;
  private readonly camera: THREE.PerspectiveCamera;
  private readonly renderer: THREE.WebGLRenderer;
  private readonly controls: OrbitControls;
  private pointsObject: THREE.Points | null = null;

  constructor(container: HTMLElement) {
    this.scene = new THREE.Scene();
    this.scene.background = new THREE.Color(0x14161a);
    const aspect = container.clientWidth / Math.max(container.clientHeight, 1);
    this.camera = new THREE.PerspectiveCamera(50, aspect, 0.01, 100);
    this.camera.position.set(1.8, -1.8, 1.4);
    this.camera.up.set(0, 0, 1);
    this.renderer = new THREE.WebGLRenderer({ antialias: true });
    this.renderer.setSize(container.clientWidth, container.clientHeight);
    container.appendChild(this.renderer.domElement);
    this.controls = new OrbitControls(this.camera, this.renderer.domElement);
    this.controls.target.set(0, 0, 0.5);
    const grid = new THREE.GridHelper(3, 12, 0x333a44, 0x23272e);
    grid.rotation.x = Math.PI / 2;
    this.scene.add(grid);
    window.addEventListener('resize', () => {
      this.camera.aspect = container.clientWidth / Math.max(container.clientHeight, 1);
      this.camera.updateProjectionMatrix();
      this.renderer.setSize(container.clientWidth, container.clientHeight);
    });
    const loop = () => {
      requestAnimationFrame(loop);
      this.controls.update();
      this.renderer.render(this.scene, this.camera);
    };
    loop();
  }

  /** Replace the displayed cloud. Camera pose is untouched. */
  updateCloud(cloud: WireCloud, colors: Float32Array) {
    if (this.pointsObject !== null) {
      this.scene.remove(this.pointsObject);
      this.pointsObject.geometry.dispose();
      (this.pointsObject.material as THREE.Material).dispose();
    }
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute('position', new THREE.Float32BufferAttribute(cloud.points, 3));
    geometry.setAttribute('color', new THREE.Float32BufferAttribute(colors, 3));
    const material = new THREE.PointsMaterial({ size: 0.03, vertexColors: true });
    this.pointsObject = new THREE.Points(geometry, material);
    this.scene.add(this.pointsObject);
  }
}
